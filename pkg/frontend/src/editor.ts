/** Editor session state: the editable curve, overlays, jobs, undo.
 *
 * The state machine is deliberately service-shaped: the curve the user edits
 * is optimistic local state, `acknowledged` is the last revision the service
 * accepted, and every overlay (target, measured RMS, E-L1 readout) comes
 * back from the service verbatim. Nothing here measures audio locally, so
 * the overlays cannot drift from what the backend computed.
 */

import type {
  EnvelopePayload,
  GenerationParams,
  JobStatus,
  SessionInfo,
  ErrorDetail,
} from "./api.js";
import { ApiError } from "./api.js";
import { EditStack, applySegment, clamp01, curvesEqual } from "./curve.js";

/** The slice of the service client the editor needs; tests inject fakes. */
export interface SessionApi {
  createSession(
    envelope: Omit<EnvelopePayload, "revision">,
    semantic?: Record<string, unknown>,
  ): Promise<SessionInfo>;
  getEnvelope(sessionId: string, rev?: number): Promise<EnvelopePayload>;
  putEnvelope(
    sessionId: string,
    envelope: Omit<EnvelopePayload, "revision">,
  ): Promise<{ revision: number }>;
  startGeneration(
    sessionId: string,
    params: GenerationParams,
  ): Promise<{ job: string; revision: number }>;
  job(jobId: string): Promise<JobStatus>;
  audio(sessionId: string, rev?: number): Promise<Uint8Array>;
  measuredEnvelope(sessionId: string, rev?: number): Promise<EnvelopePayload>;
}

export type PlaybackState = "idle" | "ready" | "playing";

export interface EditorOptions {
  /** Quiet period before an edited curve is PUT to the service. */
  debounceMs?: number;
  pollIntervalMs?: number;
  pollTimeoutMs?: number;
}

export interface GenerateOptions {
  steps?: number | null;
  cfgScale?: number | null;
  secondsTotal?: number | null;
  seed?: number;
}

const sleep = (ms: number) => new Promise<void>((resolve) => setTimeout(resolve, ms));

export class EditorState {
  /** Editable curve; every mutation goes through the stroke API. */
  values: number[];
  /** Last curve the service accepted; rollback target for rejected edits. */
  private acknowledged: number[];
  /** The envelope the session was created from (revision 1). */
  readonly target: number[];
  /** Service-measured RMS of the last finished generation, if any. */
  measured: number[] | null = null;
  eL1: number | null = null;
  revision: number;
  error: ErrorDetail | null = null;
  semanticClass: number | null = null;
  selection: { start: number; end: number } | null = null;
  playback: PlaybackState = "idle";
  lastAudio: Uint8Array | null = null;
  activeJob: string | null = null;

  readonly hop: number;
  readonly sourceSampleRate: number;

  private readonly stack = new EditStack();
  private stroke: { frame: number; value: number } | null = null;
  private strokeDirty = false;
  private dirty = false;
  private putTimer: ReturnType<typeof setTimeout> | null = null;
  private putInFlight: Promise<void> | null = null;
  private readonly debounceMs: number;
  private readonly pollIntervalMs: number;
  private readonly pollTimeoutMs: number;

  private constructor(
    private readonly client: SessionApi,
    readonly sessionId: string,
    envelope: EnvelopePayload,
    target: number[],
    opts: EditorOptions,
  ) {
    this.values = envelope.values.slice();
    this.acknowledged = envelope.values.slice();
    this.target = target;
    this.revision = envelope.revision ?? 1;
    this.hop = envelope.hop;
    this.sourceSampleRate = envelope.source_sample_rate;
    this.debounceMs = opts.debounceMs ?? 250;
    this.pollIntervalMs = opts.pollIntervalMs ?? 500;
    this.pollTimeoutMs = opts.pollTimeoutMs ?? 10 * 60 * 1000;
  }

  /** Start a session from an envelope (extracted, predicted, or drawn). */
  static async create(
    client: SessionApi,
    envelope: Omit<EnvelopePayload, "revision">,
    opts: EditorOptions = {},
  ): Promise<EditorState> {
    const info = await client.createSession(envelope);
    const current = await client.getEnvelope(info.id);
    const target = await client.getEnvelope(info.id, 1);
    return new EditorState(client, info.id, current, target.values.slice(), opts);
  }

  /** Attach to an existing session. */
  static async open(
    client: SessionApi,
    sessionId: string,
    opts: EditorOptions = {},
  ): Promise<EditorState> {
    const current = await client.getEnvelope(sessionId);
    const target = await client.getEnvelope(sessionId, 1);
    return new EditorState(client, sessionId, current, target.values.slice(), opts);
  }

  get frameCount(): number {
    return this.values.length;
  }

  get canUndo(): boolean {
    return this.stack.canUndo;
  }

  get canRedo(): boolean {
    return this.stack.canRedo;
  }

  // -- editing -------------------------------------------------------------

  beginStroke(frame: number, value: number): void {
    this.stack.push(this.values);
    this.stroke = { frame, value: clamp01(value) };
    this.strokeDirty = false;
    this.extendStroke(frame, value);
  }

  extendStroke(frame: number, value: number): void {
    if (this.stroke === null) return;
    const next = applySegment(
      this.values,
      this.stroke.frame,
      this.stroke.value,
      frame,
      value,
    );
    this.stroke = { frame, value: clamp01(value) };
    if (!curvesEqual(next, this.values)) {
      this.values = next;
      this.strokeDirty = true;
    }
  }

  endStroke(): void {
    if (this.stroke === null) return;
    this.stroke = null;
    if (this.strokeDirty) {
      this.markDirty();
    } else {
      // nothing changed; do not leave a no-op snapshot on the undo stack
      this.stack.undo(this.values);
    }
  }

  undo(): boolean {
    const previous = this.stack.undo(this.values);
    if (previous === null) return false;
    this.values = previous;
    this.markDirty();
    return true;
  }

  redo(): boolean {
    const next = this.stack.redo(this.values);
    if (next === null) return false;
    this.values = next;
    this.markDirty();
    return true;
  }

  private markDirty(): void {
    this.dirty = true;
    if (this.putTimer !== null) clearTimeout(this.putTimer);
    this.putTimer = setTimeout(() => {
      this.putTimer = null;
      this.flush().catch((err) => {
        // background flush: surface transport failures inline, keep edits
        this.error = { message: String(err) };
      });
    }, this.debounceMs);
  }

  // -- persistence ---------------------------------------------------------

  /** Push pending edits now; resolves once the service has answered. */
  async flush(): Promise<void> {
    if (this.putTimer !== null) {
      clearTimeout(this.putTimer);
      this.putTimer = null;
    }
    if (this.putInFlight !== null) await this.putInFlight;
    if (!this.dirty) return;
    this.putInFlight = this.putNow();
    try {
      await this.putInFlight;
    } finally {
      this.putInFlight = null;
    }
  }

  private async putNow(): Promise<void> {
    const values = this.values.slice();
    if (values.length !== this.acknowledged.length) {
      // edits can never resize the curve; a mismatch is a programming error
      throw new Error(
        `frame count changed from ${this.acknowledged.length} to ${values.length}`,
      );
    }
    if (values.some((v) => !(v >= 0 && v <= 1))) {
      throw new Error("unclamped value about to be submitted");
    }
    this.dirty = false;
    try {
      const { revision } = await this.client.putEnvelope(this.sessionId, {
        values,
        hop: this.hop,
        source_sample_rate: this.sourceSampleRate,
      });
      this.acknowledged = values;
      this.revision = revision;
      this.error = null;
    } catch (err) {
      if (err instanceof ApiError && err.status === 422) {
        // optimistic edit rejected: restore the accepted curve, surface why
        this.values = this.acknowledged.slice();
        this.stack.clear();
        this.error = err.detail;
        return;
      }
      this.dirty = true;
      throw err;
    }
  }

  // -- generation ----------------------------------------------------------

  /** Generate against the current revision and wait for the result. */
  async generate(opts: GenerateOptions = {}): Promise<JobStatus> {
    await this.flush();
    const params: GenerationParams = {
      class: this.semanticClass,
      steps: opts.steps ?? null,
      cfg_scale: opts.cfgScale ?? null,
      seconds_total: opts.secondsTotal ?? null,
      seed: opts.seed ?? 0,
    };
    let started;
    try {
      started = await this.client.startGeneration(this.sessionId, params);
    } catch (err) {
      if (err instanceof ApiError) {
        this.error = err.detail;
        return { id: "", status: "failed", revision: this.revision, error: err.detail.message };
      }
      throw err;
    }
    this.activeJob = started.job;
    try {
      const job = await this.poll(started.job);
      if (job.status === "done") {
        this.eL1 = job.e_l1_vs_target ?? null;
        const measured = await this.client.measuredEnvelope(this.sessionId, job.revision);
        this.measured = measured.values;
        this.lastAudio = await this.client.audio(this.sessionId, job.revision);
        this.playback = "ready";
        this.error = null;
      } else {
        this.error = { message: job.error ?? "generation failed" };
      }
      return job;
    } finally {
      this.activeJob = null;
    }
  }

  private async poll(jobId: string): Promise<JobStatus> {
    const deadline = Date.now() + this.pollTimeoutMs;
    for (;;) {
      const job = await this.client.job(jobId);
      if (job.status === "done" || job.status === "failed") return job;
      if (Date.now() > deadline) {
        return { ...job, status: "failed", error: "timed out waiting for job" };
      }
      await sleep(this.pollIntervalMs);
    }
  }
}
