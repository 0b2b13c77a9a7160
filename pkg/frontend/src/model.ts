// Pure view-model: folds trajectory events into the structures the UI renders.
// Everything here is a deterministic function of service responses.

import type {
  ActionEvent,
  FinalEvent,
  InterventionEvent,
  PatchRef,
  SessionStatus,
  StateEntry,
  TrajectoryEvent,
} from './types.js';

export type IterationView = {
  iteration: number;
  magnification: number;
  entries: StateEntry[];
  findings: PatchRef[];
  action: ActionEvent | null;
};

export type SessionView = {
  sessionId: string;
  slideId: string;
  question: string;
  options: string[];
  createdAt: string;
  status: SessionStatus;
  iterations: IterationView[];
  interventions: InterventionEvent[];
  final: FinalEvent | null;
  error: string | null;
  lastSeq: number;
};

export function emptyView(): SessionView {
  return {
    sessionId: '',
    slideId: '',
    question: '',
    options: [],
    createdAt: '',
    status: 'running',
    iterations: [],
    interventions: [],
    final: null,
    error: null,
    lastSeq: -1,
  };
}

/** Fold one event into the view. Later state events for an iteration replace
 * earlier ones (zoom and description edits re-emit the state). */
export function applyEvent(view: SessionView, event: TrajectoryEvent): SessionView {
  if (event.seq <= view.lastSeq) return view; // replayed duplicate
  view.lastSeq = event.seq;
  switch (event.event) {
    case 'session_start':
      view.sessionId = event.session_id;
      view.slideId = event.slide_id;
      view.question = event.question;
      view.options = event.options ?? [];
      view.createdAt = event.created_at;
      break;
    case 'state': {
      const existing = view.iterations.find((it) => it.iteration === event.iteration);
      if (existing) {
        existing.entries = event.entries;
        existing.findings = event.findings;
        existing.magnification = event.magnification;
      } else {
        view.iterations.push({
          iteration: event.iteration,
          magnification: event.magnification,
          entries: event.entries,
          findings: event.findings,
          action: null,
        });
        view.iterations.sort((a, b) => a.iteration - b.iteration);
      }
      break;
    }
    case 'action': {
      const step = view.iterations.find((it) => it.iteration === event.iteration);
      if (step) step.action = event;
      break;
    }
    case 'intervention':
      view.interventions.push(event);
      break;
    case 'final':
      view.final = event;
      view.status = 'done';
      break;
    case 'error':
      view.error = event.message;
      view.status = 'failed';
      break;
  }
  return view;
}

export function buildView(events: TrajectoryEvent[]): SessionView {
  const view = emptyView();
  for (const event of events) applyEvent(view, event);
  return view;
}

export function patchKey(patch: PatchRef): string {
  return `${patch.magnification}:${patch.col}:${patch.row}`;
}

/**
 * Overlay contents: every finding across iterations, mapped to the iteration
 * that examined it. Equals the union of the trajectory's findings exactly.
 */
export function overlayPatches(view: SessionView): Map<string, { patch: PatchRef; iteration: number }> {
  const overlay = new Map<string, { patch: PatchRef; iteration: number }>();
  for (const step of view.iterations) {
    for (const patch of step.findings) {
      overlay.set(patchKey(patch), { patch, iteration: step.iteration });
    }
  }
  return overlay;
}

/** Expert notes extracted from intervention records, in submission order. */
export function expertNotes(view: SessionView): string[] {
  return view.interventions
    .filter((record) => record.kind === 'inject_note')
    .map((record) => String(record.payload['text'] ?? ''));
}

export function describeAction(action: ActionEvent): string {
  switch (action.action) {
    case 'Explore':
      return `Explore: ${action.directive?.missing_info ?? ''}`;
    case 'Zoom':
      return `Zoom to ${action.directive?.recommended_zoom_level}x: ${action.directive?.missing_info ?? ''}`;
    case 'Conclude':
      return 'Conclude (evidence sufficient)';
    case 'ForcedConclude':
      return 'Conclude (budget or pool exhausted)';
  }
}

export function timelineIsOrdered(events: TrajectoryEvent[]): boolean {
  return events.every((event, i) => i === 0 || event.seq > events[i - 1]!.seq);
}
