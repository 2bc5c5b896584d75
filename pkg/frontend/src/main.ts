/** Browser entry point: canvas rendering and control wiring.
 *
 * Pointer positions map to (frame, value) and feed the stroke API; all
 * drawn overlays are exactly the arrays the service returned. The service
 * base URL defaults to same-origin and can be overridden with ?service=.
 */

import { ServiceClient } from "./api.js";
import { EditorState } from "./editor.js";

const params = new URLSearchParams(window.location.search);
const serviceUrl = params.get("service") ?? window.location.origin;
const client = new ServiceClient(serviceUrl);

const canvas = document.getElementById("curve") as HTMLCanvasElement;
const ctx = canvas.getContext("2d") as CanvasRenderingContext2D;
const statusLine = document.getElementById("status") as HTMLElement;
const errorLine = document.getElementById("error") as HTMLElement;
const el1Line = document.getElementById("el1") as HTMLElement;
const audioEl = document.getElementById("player") as HTMLAudioElement;
const classSelect = document.getElementById("semantic") as HTMLSelectElement;
const seedInput = document.getElementById("seed") as HTMLInputElement;
const stepsInput = document.getElementById("steps") as HTMLInputElement;
const cfgInput = document.getElementById("cfg") as HTMLInputElement;
const framesInput = document.getElementById("frames") as HTMLInputElement;

let editor: EditorState | null = null;
let audioUrl: string | null = null;

function setStatus(text: string): void {
  statusLine.textContent = text;
}

function showError(): void {
  if (editor?.error) {
    const { message, index } = editor.error;
    errorLine.textContent = index === undefined ? message : `${message} (frame ${index})`;
    errorLine.hidden = false;
  } else {
    errorLine.hidden = true;
  }
}

function frameAt(x: number): number {
  if (!editor) return 0;
  return (x / canvas.width) * (editor.frameCount - 1);
}

function valueAt(y: number): number {
  return 1 - y / canvas.height;
}

function tracePath(values: readonly number[]): void {
  const n = values.length;
  ctx.beginPath();
  values.forEach((v, i) => {
    const x = (i / Math.max(1, n - 1)) * canvas.width;
    const y = (1 - v) * canvas.height;
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
}

function render(): void {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!editor) return;
  ctx.lineWidth = 1;
  ctx.strokeStyle = "#ccc";
  for (const g of [0.25, 0.5, 0.75]) {
    ctx.beginPath();
    ctx.moveTo(0, g * canvas.height);
    ctx.lineTo(canvas.width, g * canvas.height);
    ctx.stroke();
  }
  ctx.strokeStyle = "#999";
  ctx.setLineDash([4, 3]);
  tracePath(editor.target);
  ctx.setLineDash([]);
  if (editor.measured) {
    ctx.strokeStyle = "#2a9d4e";
    ctx.lineWidth = 1.5;
    tracePath(editor.measured);
  }
  ctx.strokeStyle = "#1860c4";
  ctx.lineWidth = 2;
  tracePath(editor.values);
  el1Line.textContent = editor.eL1 === null ? "" : `E-L1 vs target: ${editor.eL1.toFixed(4)}`;
  showError();
}

// -- pointer editing -------------------------------------------------------

let dragging = false;

canvas.addEventListener("pointerdown", (ev) => {
  if (!editor) return;
  dragging = true;
  canvas.setPointerCapture(ev.pointerId);
  const rect = canvas.getBoundingClientRect();
  editor.beginStroke(frameAt(ev.clientX - rect.left), valueAt(ev.clientY - rect.top));
  render();
});

canvas.addEventListener("pointermove", (ev) => {
  if (!dragging || !editor) return;
  const rect = canvas.getBoundingClientRect();
  editor.extendStroke(frameAt(ev.clientX - rect.left), valueAt(ev.clientY - rect.top));
  render();
});

canvas.addEventListener("pointerup", () => {
  if (!dragging || !editor) return;
  dragging = false;
  editor.endStroke();
  render();
});

// -- controls --------------------------------------------------------------

document.getElementById("undo")?.addEventListener("click", () => {
  editor?.undo();
  render();
});

document.getElementById("redo")?.addEventListener("click", () => {
  editor?.redo();
  render();
});

window.addEventListener("keydown", (ev) => {
  if (!(ev.ctrlKey || ev.metaKey)) return;
  if (ev.key === "z") {
    ev.preventDefault();
    if (ev.shiftKey) editor?.redo();
    else editor?.undo();
    render();
  }
});

document.getElementById("new-session")?.addEventListener("click", () => {
  void (async () => {
    const frames = Math.max(2, Number(framesInput.value) || 250);
    const envelope = {
      values: new Array<number>(frames).fill(0),
      hop: 32,
      source_sample_rate: 4000,
    };
    setStatus("creating session...");
    editor = await EditorState.create(client, envelope);
    setStatus(`session ${editor.sessionId.slice(0, 8)} rev ${editor.revision}`);
    render();
  })();
});

document.getElementById("upload")?.addEventListener("change", (ev) => {
  const input = ev.target as HTMLInputElement;
  const file = input.files?.[0];
  if (!file) return;
  void (async () => {
    setStatus("extracting envelope...");
    const bytes = new Uint8Array(await file.arrayBuffer());
    const envelope = await client.extractEnvelope(bytes);
    editor = await EditorState.create(client, envelope);
    setStatus(`session ${editor.sessionId.slice(0, 8)} rev ${editor.revision}`);
    render();
  })();
});

document.getElementById("generate")?.addEventListener("click", () => {
  if (!editor) return;
  void (async () => {
    const state = editor as EditorState;
    state.semanticClass = classSelect.value === "" ? null : Number(classSelect.value);
    setStatus("generating...");
    const job = await state.generate({
      seed: Number(seedInput.value) || 0,
      steps: stepsInput.value === "" ? null : Number(stepsInput.value),
      cfgScale: cfgInput.value === "" ? null : Number(cfgInput.value),
    });
    if (job.status === "done" && state.lastAudio) {
      if (audioUrl !== null) URL.revokeObjectURL(audioUrl);
      const wav = new Uint8Array(state.lastAudio);
      audioUrl = URL.createObjectURL(new Blob([wav.buffer], { type: "audio/wav" }));
      audioEl.src = audioUrl;
      setStatus(`rev ${job.revision} generated`);
    } else {
      setStatus("generation failed");
    }
    render();
  })();
});

setStatus("no session; create one or upload audio");
render();
