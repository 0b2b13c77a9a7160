// Typed client for the session service. All console data flows through here.

import type {
  InterventionKind,
  SessionSummary,
  SlideInfo,
  TrajectoryEvent,
} from './types.js';

export class ApiError extends Error {
  status: number;
  detail: unknown;

  constructor(status: number, detail: unknown) {
    super(`HTTP ${status}: ${typeof detail === 'string' ? detail : JSON.stringify(detail)}`);
    this.status = status;
    this.detail = detail;
  }
}

async function parseError(response: Response): Promise<ApiError> {
  let detail: unknown = response.statusText;
  try {
    const body = (await response.json()) as { detail?: unknown };
    if (body && body.detail !== undefined) detail = body.detail;
  } catch {
    // keep the status text
  }
  return new ApiError(response.status, detail);
}

export type CreateSessionBody = {
  slide_id: string;
  question: string;
  options?: string[];
  config?: Record<string, unknown>;
};

export type StreamOptions = {
  signal?: AbortSignal;
  lastEventId?: number;
  maxReconnects?: number;
};

export class Client {
  baseUrl: string;

  constructor(baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, '');
  }

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await fetch(this.baseUrl + path, init);
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  private post<T>(path: string, body?: unknown): Promise<T> {
    return this.request<T>(path, {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
  }

  listSlides(): Promise<SlideInfo[]> {
    return this.request<SlideInfo[]>('/v1/slides');
  }

  getManifest(slideId: string): Promise<Record<string, unknown>> {
    return this.request(`/v1/slides/${encodeURIComponent(slideId)}/manifest`);
  }

  tileUrl(slideId: string, mag: number, col: number, row: number): string {
    return `${this.baseUrl}/v1/slides/${encodeURIComponent(slideId)}/tiles/${mag}/${col}/${row}`;
  }

  createSession(body: CreateSessionBody): Promise<SessionSummary> {
    return this.post<SessionSummary>('/v1/sessions', body);
  }

  listSessions(): Promise<SessionSummary[]> {
    return this.request<SessionSummary[]>('/v1/sessions');
  }

  getSession(id: string): Promise<SessionSummary> {
    return this.request<SessionSummary>(`/v1/sessions/${encodeURIComponent(id)}`);
  }

  resume(id: string): Promise<SessionSummary> {
    return this.post<SessionSummary>(`/v1/sessions/${encodeURIComponent(id)}/resume`);
  }

  intervene(id: string, kind: InterventionKind, payload: Record<string, unknown>,
            author = 'console'): Promise<SessionSummary> {
    return this.post<SessionSummary>(
      `/v1/sessions/${encodeURIComponent(id)}/interventions`,
      { kind, payload, author },
    );
  }

  getTrajectory(id: string): Promise<TrajectoryEvent[]> {
    return this.request<TrajectoryEvent[]>(`/v1/sessions/${encodeURIComponent(id)}/trajectory`);
  }

  /** Raw trajectory body text, exactly as the service serialized it. */
  async exportTrajectory(id: string): Promise<string> {
    const response = await fetch(`${this.baseUrl}/v1/sessions/${encodeURIComponent(id)}/trajectory`);
    if (!response.ok) throw await parseError(response);
    return response.text();
  }

  /**
   * Subscribe to the live event stream. Resolves once the server signals the
   * end of the session; reconnects with the last seen sequence number on
   * connection drops.
   */
  async streamEvents(
    id: string,
    onEvent: (event: TrajectoryEvent) => void,
    options: StreamOptions = {},
  ): Promise<number> {
    let lastSeen = options.lastEventId ?? -1;
    let reconnectsLeft = options.maxReconnects ?? 5;
    for (;;) {
      try {
        const ended = await this.streamOnce(id, lastSeen, options.signal, (event) => {
          lastSeen = event.seq;
          onEvent(event);
        });
        if (ended) return lastSeen;
      } catch (error) {
        if (options.signal?.aborted) return lastSeen;
        if (reconnectsLeft <= 0) throw error;
      }
      if (options.signal?.aborted) return lastSeen;
      reconnectsLeft -= 1;
      await new Promise((resolve) => setTimeout(resolve, 250));
    }
  }

  private async streamOnce(
    id: string,
    lastSeen: number,
    signal: AbortSignal | undefined,
    onEvent: (event: TrajectoryEvent) => void,
  ): Promise<boolean> {
    const headers: Record<string, string> = {};
    if (lastSeen >= 0) headers['Last-Event-ID'] = String(lastSeen);
    const response = await fetch(
      `${this.baseUrl}/v1/sessions/${encodeURIComponent(id)}/events`,
      { headers, signal },
    );
    if (!response.ok) throw await parseError(response);
    if (!response.body) throw new Error('event stream has no body');

    const reader = response.body.getReader();
    const decoder = new TextDecoder();
    let buffer = '';
    let ended = false;
    for (;;) {
      const { done, value } = await reader.read();
      if (done) break;
      buffer += decoder.decode(value, { stream: true });
      let boundary;
      while ((boundary = buffer.indexOf('\n\n')) !== -1) {
        const frame = buffer.slice(0, boundary);
        buffer = buffer.slice(boundary + 2);
        if (frame.includes('event: end')) {
          ended = true;
          continue;
        }
        for (const line of frame.split('\n')) {
          if (line.startsWith('data: ')) {
            const payload = JSON.parse(line.slice('data: '.length)) as TrajectoryEvent;
            if (payload && typeof payload.seq === 'number') onEvent(payload);
          }
        }
      }
    }
    return ended;
  }
}
