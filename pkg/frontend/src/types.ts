// Payload shapes served by the session service. The console renders these
// verbatim; it never derives diagnostic content on its own.

export type PatchRef = {
  magnification: number;
  col: number;
  row: number;
  patch_index: number;
};

export type StateEntry = {
  magnification: number;
  col: number;
  row: number;
  patch_index: number;
  text: string;
  prompt_kind: string;
  question: string | null;
};

export type Predicted = { answer: string; thinking_steps: string };
export type Verdict = { sufficient: boolean };

export type Directive = {
  missing_info: string;
  zoom_recommendation: boolean;
  recommended_zoom_level: number | null;
  zoom_reason: string;
  warnings: string[];
};

export type SessionStartEvent = {
  event: 'session_start';
  seq: number;
  session_id: string;
  slide_id: string;
  question: string;
  options: string[];
  config: Record<string, unknown>;
  created_at: string;
};

export type StateEvent = {
  event: 'state';
  seq: number;
  iteration: number;
  magnification: number;
  entries: StateEntry[];
  relevance_order: number[];
  findings: PatchRef[];
};

export type ActionEvent = {
  event: 'action';
  seq: number;
  iteration: number;
  action: 'Explore' | 'Zoom' | 'Conclude' | 'ForcedConclude';
  predicted: Predicted;
  verdict: Verdict;
  directive: Directive | null;
  warnings: string[];
  prompt_preview: string;
};

export type InterventionEvent = {
  event: 'intervention';
  seq: number;
  at_iteration: number;
  kind: string;
  payload: Record<string, unknown>;
  author: string;
  timestamp: string;
};

export type FinalEvent = {
  event: 'final';
  seq: number;
  answer: string;
  reasoning_chain: string;
  iterations_used: number;
  prompt_preview: string;
  finished_at: string;
};

export type ErrorEvent = {
  event: 'error';
  seq: number;
  message: string;
  finished_at: string;
};

export type TrajectoryEvent =
  | SessionStartEvent
  | StateEvent
  | ActionEvent
  | InterventionEvent
  | FinalEvent
  | ErrorEvent;

export type Checkpoint = {
  kind: 'pre_sampling' | 'post_sampling' | 'post_reasoning';
  iteration: number;
  pending: PatchRef[];
  action: string | null;
  degraded: boolean;
};

export type SessionStatus = 'running' | 'paused' | 'awaiting_intervention' | 'done' | 'failed';

export type SessionSummary = {
  id: string;
  status: SessionStatus;
  current_iteration: number;
  created_at: string;
  checkpoint: Checkpoint | null;
  entry_count: number;
  last_action: string | null;
  final: { answer: string; reasoning_chain: string; iterations_used: number } | null;
  prompt_preview: string | null;
  error: string | null;
};

export type SlideLevel = { magnification: number; grid_w: number; grid_h: number };

export type SlideInfo = {
  slide_id: string;
  tile_size_px: number;
  levels: SlideLevel[];
};

export type InterventionKind =
  | 'select_rois'
  | 'edit_description'
  | 'inject_note'
  | 'set_magnification'
  | 'finalize';
