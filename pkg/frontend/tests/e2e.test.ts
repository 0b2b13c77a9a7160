// End-to-end: drive the console workflow against the real service running
// scripted backends. Exercises exactly what the UI handlers call: create an
// interactive session, select RoIs on the overlay, edit a description,
// resume to completion, export the trajectory.

import { afterAll, beforeAll, describe, expect, it } from 'vitest';
import { spawn, spawnSync, type ChildProcess } from 'node:child_process';
import { mkdtempSync, rmSync, writeFileSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join, resolve } from 'node:path';
import { fileURLToPath } from 'node:url';

import { ApiError, Client } from '../src/api.js';
import { buildView, overlayPatches, patchKey } from '../src/model.js';
import { RoiSelection, baseLevel } from '../src/overlay.js';
import type { SessionSummary, TrajectoryEvent } from '../src/types.js';

const repoRoot = resolve(fileURLToPath(import.meta.url), '../../..');
const port = 23000 + Math.floor(Math.random() * 8000);
const baseUrl = `http://127.0.0.1:${port}`;

let workdir: string;
let server: ChildProcess | null = null;
const client = new Client(baseUrl);

const EXECUTOR_SCRIPT = [
  { contains: 'judge whether the current patch descriptions',
    response: '{"sufficient": "No"}', times: 1 },
  { contains: 'judge whether the current patch descriptions',
    response: '{"sufficient": "Yes"}' },
  { contains: 'specify what visual evidence is missing',
    response: JSON.stringify({
      missing_info: 'mitotic figures', zoom_recommendation: 'No',
      recommended_zoom_level: 'None', zoom_reason: '',
    }) },
  { contains: 'slide-level diagnostic result',
    response: '{"answer": "Grade II/III", "thinking_steps": "combined evidence"}' },
  { contains: 'trying to answer the question step-by-step',
    response: '{"answer": "Grade II/III", "thinking_steps": "initial read"}' },
];

async function waitForService(timeoutMs = 20000): Promise<void> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    try {
      const response = await fetch(`${baseUrl}/v1/slides`);
      if (response.ok) return;
    } catch {
      // not up yet
    }
    if (Date.now() > deadline) throw new Error('service did not start');
    await new Promise((r) => setTimeout(r, 200));
  }
}

function assertOverlayEqualsFindings(events: TrajectoryEvent[]): void {
  const view = buildView(events);
  const overlay = new Set(overlayPatches(view).keys());
  const findings = new Set(
    view.iterations.flatMap((step) => step.findings.map(patchKey)));
  expect(overlay).toEqual(findings);
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), 'console-e2e-'));
  const made = spawnSync('python3', [
    join(repoRoot, 'scripts', 'make_bundle.py'),
    '--out', join(workdir, 'slides', 'case-e2e'),
    '--slide-id', 'case-e2e', '--levels', '5:6x5,20:24x20', '--tile-size', '32',
  ], { encoding: 'utf-8' });
  expect(made.status, made.stderr).toBe(0);

  const config = {
    navigator: { type: 'scripted', dim: 32 },
    perceptor: { type: 'scripted',
                 default_template: 'epithelial field {image_hash}' },
    executor: { type: 'scripted', script: EXECUTOR_SCRIPT },
  };
  writeFileSync(join(workdir, 'config.json'), JSON.stringify(config));

  server = spawn('python3', [
    '-m', 'slideagent.cli', 'serve',
    '--slides', join(workdir, 'slides'),
    '--sessions', join(workdir, 'sessions'),
    '--config', join(workdir, 'config.json'),
    '--port', String(port),
  ], { stdio: ['ignore', 'pipe', 'pipe'] });
  server.stderr?.on('data', (chunk) => process.stderr.write(`[serve] ${chunk}`));
  await waitForService();
});

afterAll(async () => {
  if (server) {
    server.kill('SIGTERM');
    await new Promise((r) => setTimeout(r, 300));
    if (server.exitCode === null) server.kill('SIGKILL');
  }
  rmSync(workdir, { recursive: true, force: true });
});

describe('console end-to-end against the scripted service', () => {
  let sessionId: string;

  it('lists the slide and creates an interactive session paused before sampling', async () => {
    const slides = await client.listSlides();
    expect(slides.map((s) => s.slide_id)).toEqual(['case-e2e']);
    expect(baseLevel(slides[0]!).magnification).toBe(5);

    const summary = await client.createSession({
      slide_id: 'case-e2e',
      question: 'Which histological grade is present?',
      options: ['Grade I/III', 'Grade II/III', 'Grade III/III'],
      config: { interactive: true },
    });
    sessionId = summary.id;
    expect(summary.status).toBe('paused');
    expect(summary.checkpoint?.kind).toBe('pre_sampling');
  });

  it('rejects a premature finalize with 422 surfaced as ApiError', async () => {
    await expect(client.intervene(sessionId, 'finalize', {}))
      .rejects.toMatchObject({ status: 422 });
    // the session is still paused at the same checkpoint
    const summary = await client.getSession(sessionId);
    expect(summary.status).toBe('paused');
  });

  it('selects 3 RoIs on the overlay and samples exactly those', async () => {
    const selection = new RoiSelection();
    selection.toggle(0, 0);
    selection.toggle(2, 1);
    selection.toggle(4, 3);
    const summary = await client.intervene(
      sessionId, 'select_rois', selection.toPayload(5));
    expect(summary.status).toBe('paused');

    const atSampling = await client.resume(sessionId);
    expect(atSampling.checkpoint?.kind).toBe('post_sampling');
    const pending = atSampling.checkpoint!.pending.map((p) => [p.col, p.row]);
    expect(pending).toEqual([[0, 0], [2, 1], [4, 3]]);

    const atReasoning = await client.resume(sessionId);
    expect(atReasoning.checkpoint?.kind).toBe('post_reasoning');

    const events = await client.getTrajectory(sessionId);
    assertOverlayEqualsFindings(events);
    const view = buildView(events);
    expect(view.iterations[0]!.findings.map((p) => [p.col, p.row]))
      .toEqual([[0, 0], [2, 1], [4, 3]]);
    expect(view.iterations[0]!.entries).toHaveLength(3);
  });

  it('edits one description and sees it in the next prompt preview', async () => {
    const view = buildView(await client.getTrajectory(sessionId));
    const target = view.iterations[0]!.entries[0]!;
    const summary = await client.intervene(sessionId, 'edit_description', {
      iteration: 1,
      magnification: target.magnification,
      col: target.col,
      row: target.row,
      text: 'console-corrected: comedo necrosis present',
    });
    expect(summary.prompt_preview).toContain('console-corrected: comedo necrosis present');
    assertOverlayEqualsFindings(await client.getTrajectory(sessionId));
  });

  it('resumes to completion with the overlay matching findings at every step', async () => {
    let summary: SessionSummary = await client.getSession(sessionId);
    let guard = 0;
    while (summary.status === 'paused' || summary.status === 'awaiting_intervention') {
      summary = await client.resume(sessionId);
      assertOverlayEqualsFindings(await client.getTrajectory(sessionId));
      guard += 1;
      expect(guard).toBeLessThan(20);
    }
    expect(summary.status).toBe('done');
    expect(summary.final?.answer).toBe('Grade II/III');

    const view = buildView(await client.getTrajectory(sessionId));
    expect(view.iterations.length).toBe(2); // explore once, then conclude
    expect(view.final?.prompt_preview).toContain('console-corrected: comedo necrosis present');
    expect(view.interventions.map((record) => record.kind))
      .toEqual(['select_rois', 'edit_description']);
  });

  it('exports a trajectory identical to the API body', async () => {
    const exported = await client.exportTrajectory(sessionId);
    const apiBody = await client.exportTrajectory(sessionId);
    expect(exported).toBe(apiBody);
    expect(JSON.parse(exported)).toEqual(await client.getTrajectory(sessionId));
  });

  it('streams the full event log with contiguous sequence numbers', async () => {
    const seen: number[] = [];
    await client.streamEvents(sessionId, (event) => seen.push(event.seq));
    expect(seen).toEqual([...seen].sort((a, b) => a - b));
    expect(seen[0]).toBe(0);
    expect(seen).toEqual(Array.from({ length: seen.length }, (_, i) => i));
    const events = await client.getTrajectory(sessionId);
    expect(seen.length).toBe(events.length);
  });

  it('resumes the stream from a last-seen sequence number', async () => {
    const seen: number[] = [];
    await client.streamEvents(sessionId, (event) => seen.push(event.seq),
                              { lastEventId: 2 });
    expect(seen[0]).toBe(3);
  });

  it('returns 404 errors the dashboard can surface', async () => {
    await expect(client.getSession('does-not-exist'))
      .rejects.toSatisfy((error: unknown) =>
        error instanceof ApiError && error.status === 404);
  });
});
