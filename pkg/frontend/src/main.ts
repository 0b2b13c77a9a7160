// Console app: session dashboard, live session view with slide overlay,
// intervention panel, and trajectory inspector. Hash routing, no framework.

import { ApiError, Client } from './api.js';
import {
  SessionView,
  buildView,
  describeAction,
  emptyView,
  applyEvent,
  expertNotes,
  overlayPatches,
  patchKey,
} from './model.js';
import {
  RoiSelection,
  baseLevel,
  cellAt,
  colorForIteration,
  patchRect,
  toPixels,
} from './overlay.js';
import type { SessionSummary, SlideInfo, TrajectoryEvent } from './types.js';

const client = new Client(localStorage.getItem('slideagent-url') ?? '');
const root = document.getElementById('app')!;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K, attrs: Record<string, string> = {}, ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === 'class') node.className = value;
    else node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function banner(message: string, retry?: () => void): HTMLElement {
  const box = el('div', { class: 'banner error' }, message);
  if (retry) {
    const button = el('button', {}, 'Retry');
    button.onclick = retry;
    box.append(' ', button);
  }
  return box;
}

function statusBadge(status: string): HTMLElement {
  return el('span', { class: `badge status-${status}` }, status);
}

// ---------------------------------------------------------------------------
// Dashboard
// ---------------------------------------------------------------------------

async function renderDashboard(): Promise<void> {
  root.replaceChildren(el('p', { class: 'muted' }, 'loading…'));
  let slides: SlideInfo[];
  let sessions: SessionSummary[];
  try {
    [slides, sessions] = await Promise.all([client.listSlides(), client.listSessions()]);
  } catch (error) {
    root.replaceChildren(banner(`service unreachable: ${error}`, () => void renderDashboard()));
    return;
  }

  const slideSelect = el('select', { id: 'slide' });
  for (const slide of slides) {
    slideSelect.append(el('option', { value: slide.slide_id }, slide.slide_id));
  }
  const question = el('input', { id: 'question', placeholder: 'Question about the slide' });
  const options = el('input', { id: 'options', placeholder: 'Options (comma-separated, optional)' });
  const interactive = el('input', { id: 'interactive', type: 'checkbox', checked: 'checked' });
  const createButton = el('button', { class: 'primary' }, 'Create session');
  const formError = el('div', { class: 'inline-error' });

  createButton.onclick = async () => {
    formError.textContent = '';
    try {
      const body = {
        slide_id: slideSelect.value,
        question: question.value,
        options: options.value
          ? options.value.split(',').map((s) => s.trim()).filter(Boolean)
          : undefined,
        config: { interactive: interactive.checked },
      };
      const summary = await client.createSession(body);
      location.hash = `#/session/${summary.id}`;
    } catch (error) {
      formError.textContent = String(error);
    }
  };

  const rows = sessions.map((summary) => {
    const link = el('a', { href: `#/session/${summary.id}` }, summary.id);
    return el('tr', {},
      el('td', {}, link),
      el('td', {}, statusBadge(summary.status)),
      el('td', {}, String(summary.current_iteration)),
      el('td', {}, summary.last_action ?? '—'),
      el('td', {}, summary.final?.answer ?? ''));
  });

  root.replaceChildren(
    el('h1', {}, 'slide sessions'),
    el('section', { class: 'card' },
      el('h2', {}, 'new session'),
      el('div', { class: 'form-row' }, el('label', {}, 'slide '), slideSelect),
      el('div', { class: 'form-row' }, question),
      el('div', { class: 'form-row' }, options),
      el('div', { class: 'form-row' }, el('label', {}, 'interactive '), interactive),
      el('div', { class: 'form-row' }, createButton),
      formError),
    el('section', { class: 'card' },
      el('h2', {}, 'sessions'),
      sessions.length
        ? el('table', {},
            el('thead', {}, el('tr', {},
              el('th', {}, 'id'), el('th', {}, 'status'), el('th', {}, 'iteration'),
              el('th', {}, 'last action'), el('th', {}, 'answer'))),
            el('tbody', {}, ...rows))
        : el('p', { class: 'muted' }, 'none yet')),
  );
}

// ---------------------------------------------------------------------------
// Session view
// ---------------------------------------------------------------------------

type SessionPage = {
  id: string;
  summary: SessionSummary | null;
  view: SessionView;
  slide: SlideInfo | null;
  selection: RoiSelection;
  abort: AbortController;
};

let page: SessionPage | null = null;

async function renderSession(id: string): Promise<void> {
  page?.abort.abort();
  page = { id, summary: null, view: emptyView(), slide: null,
           selection: new RoiSelection(), abort: new AbortController() };
  const current = page;
  root.replaceChildren(el('p', { class: 'muted' }, 'loading session…'));

  try {
    current.summary = await client.getSession(id);
    const events = await client.getTrajectory(id);
    current.view = buildView(events);
    const slides = await client.listSlides();
    current.slide = slides.find((s) => s.slide_id === current.view.slideId) ?? null;
  } catch (error) {
    if (error instanceof ApiError && error.status === 404) {
      root.replaceChildren(banner(`no such session: ${id}`), backLink());
      return;
    }
    root.replaceChildren(banner(`failed to load session: ${error}`, () => void renderSession(id)));
    return;
  }
  paint(current);

  // one live subscription per open view; reconnects with the last seen seq
  void client.streamEvents(id, (event: TrajectoryEvent) => {
    if (page !== current) return;
    applyEvent(current.view, event);
    void refreshSummary(current);
  }, { signal: current.abort.signal, lastEventId: current.view.lastSeq })
    .catch(() => undefined);
}

async function refreshSummary(current: SessionPage): Promise<void> {
  try {
    current.summary = await client.getSession(current.id);
  } catch {
    return;
  }
  if (page === current) paint(current);
}

function backLink(): HTMLElement {
  return el('p', {}, el('a', { href: '#/' }, '← all sessions'));
}

function paint(current: SessionPage): void {
  const { view, summary } = current;
  root.replaceChildren(
    backLink(),
    el('h1', {}, `session ${view.sessionId || current.id}`),
    el('p', { class: 'muted' },
      `${view.slideId} — ${view.question}`,
      view.options.length ? ` [${view.options.join(' | ')}]` : ''),
    el('div', { class: 'columns' },
      el('div', { class: 'col' }, overviewPanel(current), interventionPanel(current)),
      el('div', { class: 'col' }, timelinePanel(current))),
  );
  const status = summary?.status ?? view.status;
  root.insertBefore(
    el('p', {}, statusBadge(status),
      summary?.checkpoint
        ? ` paused at ${summary.checkpoint.kind} (iteration ${summary.checkpoint.iteration}` +
          (summary.checkpoint.action ? `, pending ${summary.checkpoint.action}` : '') + ')'
        : '',
      view.error ? ` — ${view.error}` : ''),
    root.children[2]!,
  );
}

const CELL_PX = 48;

function overviewPanel(current: SessionPage): HTMLElement {
  const { view, slide, selection } = current;
  const panel = el('section', { class: 'card' }, el('h2', {}, 'slide overview'));
  if (!slide) {
    panel.append(el('p', { class: 'muted' }, 'slide metadata unavailable'));
    return panel;
  }
  const base = baseLevel(slide);
  const grid = el('div', {
    class: 'overview',
    style: `width:${base.grid_w * CELL_PX}px;height:${base.grid_h * CELL_PX}px;`,
  });
  for (let row = 0; row < base.grid_h; row += 1) {
    for (let col = 0; col < base.grid_w; col += 1) {
      const img = el('img', {
        src: client.tileUrl(slide.slide_id, base.magnification, col, row),
        class: 'tile',
        style: `left:${col * CELL_PX}px;top:${row * CELL_PX}px;width:${CELL_PX}px;height:${CELL_PX}px;`,
        alt: `tile ${col},${row}`,
      });
      img.onerror = () => img.classList.add('missing');
      grid.append(img);
    }
  }
  // findings overlay, color-coded by iteration; zoomed findings draw as sub-cells
  for (const { patch, iteration } of overlayPatches(view).values()) {
    const rect = toPixels(patchRect(patch, base.magnification), CELL_PX);
    grid.append(el('div', {
      class: 'finding',
      style: `left:${rect.left}px;top:${rect.top}px;width:${rect.width}px;` +
             `height:${rect.height}px;border-color:${colorForIteration(iteration)};`,
      title: `iteration ${iteration} — mag ${patch.magnification}x (${patch.col},${patch.row})`,
    }));
  }
  // draft RoI selection
  for (const { col, row } of selection.list()) {
    grid.append(el('div', {
      class: 'selection',
      style: `left:${col * CELL_PX}px;top:${row * CELL_PX}px;width:${CELL_PX}px;height:${CELL_PX}px;`,
    }));
  }
  grid.onclick = (mouse) => {
    const bounds = grid.getBoundingClientRect();
    const cell = cellAt(base, CELL_PX, mouse.clientX - bounds.left, mouse.clientY - bounds.top);
    if (!cell) return;
    current.selection.toggle(cell.col, cell.row);
    paint(current);
  };
  panel.append(grid);
  const legendItems = view.iterations.map((step) =>
    el('span', { class: 'legend-item' },
      el('span', { class: 'swatch', style: `background:${colorForIteration(step.iteration)}` }),
      ` iteration ${step.iteration}`));
  panel.append(el('div', { class: 'legend' }, ...legendItems));
  return panel;
}

function interventionPanel(current: SessionPage): HTMLElement {
  const { summary, selection, view } = current;
  const paused = summary?.status === 'paused' || summary?.status === 'awaiting_intervention';
  const panel = el('section', { class: 'card' }, el('h2', {}, 'steer'));
  const feedback = el('div', { class: 'inline-error' });

  const submit = async (action: () => Promise<SessionSummary>) => {
    feedback.textContent = '';
    try {
      current.summary = await action();
      const events = await client.getTrajectory(current.id);
      current.view = buildView(events); // reconcile with the server trajectory
      if (page === current) paint(current);
    } catch (error) {
      feedback.textContent = String(error); // 409/422 shown inline, drafts kept
      if (page === current) panel.append(feedback);
    }
  };

  const resumeButton = el('button', { class: 'primary' }, 'Resume');
  resumeButton.onclick = () => void submit(() => client.resume(current.id));
  const finalizeButton = el('button', {}, 'Finalize now');
  finalizeButton.onclick = () => void submit(() => client.intervene(current.id, 'finalize', {}));

  const roisButton = el('button', {},
    `Use ${selection.size || 'selected'} RoI${selection.size === 1 ? '' : 's'}`);
  roisButton.onclick = () => void submit(async () => {
    const base = current.slide ? baseLevel(current.slide).magnification : 5;
    const summary = await client.intervene(current.id, 'select_rois', selection.toPayload(base));
    selection.clear();
    return summary;
  });

  const noteInput = el('input', { placeholder: 'Expert note for the model' });
  const noteButton = el('button', {}, 'Inject note');
  noteButton.onclick = () => void submit(async () => {
    const summary = await client.intervene(current.id, 'inject_note', { text: noteInput.value });
    noteInput.value = '';
    return summary;
  });

  const magPicker = el('select', {});
  const baseMag = current.slide ? baseLevel(current.slide).magnification : 5;
  for (const level of current.slide?.levels ?? []) {
    if (level.magnification > baseMag) {
      magPicker.append(el('option', { value: String(level.magnification) },
        `${level.magnification}x`));
    }
  }
  const magButton = el('button', {}, 'Set zoom level');
  magButton.onclick = () => void submit(() =>
    client.intervene(current.id, 'set_magnification',
      { magnification: Number(magPicker.value) }));

  for (const button of [resumeButton, finalizeButton, roisButton, noteButton, magButton]) {
    if (!paused) button.setAttribute('disabled', 'disabled');
  }
  if (magPicker.childElementCount === 0) magButton.setAttribute('disabled', 'disabled');

  panel.append(
    el('div', { class: 'form-row' }, resumeButton, ' ', finalizeButton),
    el('div', { class: 'form-row' }, roisButton,
      el('span', { class: 'muted' }, ' (click overview cells to draft)')),
    el('div', { class: 'form-row' }, noteInput, noteButton),
    el('div', { class: 'form-row' }, magPicker, magButton),
    feedback,
  );
  const notes = expertNotes(view);
  if (notes.length) {
    panel.append(el('div', { class: 'muted' }, `notes: ${notes.join(' · ')}`));
  }
  if (summary?.prompt_preview) {
    panel.append(el('details', {},
      el('summary', {}, 'next prompt preview'),
      el('pre', { class: 'preview' }, summary.prompt_preview)));
  }
  return panel;
}

function timelinePanel(current: SessionPage): HTMLElement {
  const { view } = current;
  const panel = el('section', { class: 'card' }, el('h2', {}, 'trajectory'));

  const exportButton = el('button', {}, 'Export trajectory JSON');
  exportButton.onclick = async () => {
    const text = await client.exportTrajectory(current.id);
    const blob = new Blob([text], { type: 'application/json' });
    const link = el('a', {
      href: URL.createObjectURL(blob),
      download: `${view.sessionId || current.id}-trajectory.json`,
    });
    link.click();
    URL.revokeObjectURL(link.href);
  };
  panel.append(el('div', { class: 'form-row' }, exportButton));

  for (const step of view.iterations) {
    const card = el('div', { class: 'iteration-card' },
      el('h3', {},
        el('span', { class: 'swatch', style: `background:${colorForIteration(step.iteration)}` }),
        ` iteration ${step.iteration} (${step.magnification}x)`));
    const thumbs = el('div', { class: 'thumbs' });
    for (const patch of step.findings.slice(0, 8)) {
      const img = el('img', {
        class: 'thumb',
        src: client.tileUrl(view.slideId, patch.magnification, patch.col, patch.row),
        title: `${patch.magnification}x (${patch.col},${patch.row})`,
        alt: `patch ${patch.col},${patch.row}`,
      });
      img.onerror = () => img.classList.add('missing'); // placeholder for missing tiles
      thumbs.append(img);
    }
    card.append(thumbs);
    for (const entry of step.entries) {
      const line = el('div', { class: 'entry' },
        el('code', {}, `${entry.magnification}x (${entry.col},${entry.row})`),
        ` ${entry.text}`);
      const editButton = el('button', { class: 'tiny' }, 'edit');
      editButton.onclick = async () => {
        const text = prompt('Corrected description:', entry.text);
        if (text === null) return;
        try {
          current.summary = await client.intervene(current.id, 'edit_description', {
            iteration: step.iteration, magnification: entry.magnification,
            col: entry.col, row: entry.row, text,
          });
          const events = await client.getTrajectory(current.id);
          current.view = buildView(events);
          if (page === current) paint(current);
        } catch (error) {
          alert(String(error));
        }
      };
      line.append(' ', editButton);
      card.append(line);
    }
    if (step.action) {
      card.append(
        el('div', { class: 'action' },
          el('strong', {}, describeAction(step.action)),
          el('div', {}, `predicted: ${step.action.predicted.answer}`),
          el('div', { class: 'muted' }, step.action.predicted.thinking_steps),
          el('div', {}, `sufficient: ${step.action.verdict.sufficient ? 'yes' : 'no'}`),
          ...step.action.warnings.map((w) => el('div', { class: 'warning' }, w))),
      );
    }
    panel.append(card);
  }
  if (view.final) {
    panel.append(el('div', { class: 'iteration-card final' },
      el('h3', {}, 'final answer'),
      el('div', {}, el('strong', {}, view.final.answer)),
      el('div', { class: 'muted' }, view.final.reasoning_chain),
      el('div', { class: 'muted' }, `iterations used: ${view.final.iterations_used}`)));
  }
  if (view.error) {
    panel.append(el('div', { class: 'iteration-card error' },
      el('h3', {}, 'session failed'),
      el('div', {}, view.error),
      el('div', { class: 'muted' }, 'partial trajectory shown above')));
  }
  return panel;
}

// ---------------------------------------------------------------------------
// Routing
// ---------------------------------------------------------------------------

function route(): void {
  const hash = location.hash || '#/';
  const match = hash.match(/^#\/session\/(.+)$/);
  if (match) void renderSession(decodeURIComponent(match[1]!));
  else void renderDashboard();
}

window.addEventListener('hashchange', route);
route();
