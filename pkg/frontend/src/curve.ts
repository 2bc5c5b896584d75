/** Pure curve-editing primitives: clamping, stroke interpolation, undo.
 *
 * Everything here is DOM-free and side-effect-free so the editing rules can
 * be tested exactly. Edits always return a new array of the same length;
 * the frame count of a session envelope is fixed for its whole life.
 */

export function clamp01(value: number): number {
  if (Number.isNaN(value)) return 0;
  return value < 0 ? 0 : value > 1 ? 1 : value;
}

function clampIndex(index: number, length: number): number {
  const i = Math.round(index);
  return i < 0 ? 0 : i >= length ? length - 1 : i;
}

/** Set the straight line between two stroke samples, endpoints included.
 *
 * Pointer events are sparser than frames, so a drag arrives as a sequence
 * of (frame, value) samples; interpolating each consecutive pair keeps the
 * drawn curve continuous no matter how fast the pointer moved.
 */
export function applySegment(
  values: readonly number[],
  fromFrame: number,
  fromValue: number,
  toFrame: number,
  toValue: number,
): number[] {
  const out = values.slice();
  if (out.length === 0) return out;
  let i0 = clampIndex(fromFrame, out.length);
  let i1 = clampIndex(toFrame, out.length);
  let v0 = clamp01(fromValue);
  let v1 = clamp01(toValue);
  if (i1 < i0) {
    [i0, i1] = [i1, i0];
    [v0, v1] = [v1, v0];
  }
  if (i0 === i1) {
    out[i1] = v1;
    return out;
  }
  for (let i = i0; i <= i1; i++) {
    const t = (i - i0) / (i1 - i0);
    out[i] = clamp01(v0 + t * (v1 - v0));
  }
  return out;
}

/** Zero frames in [start, end), clamped to the curve bounds. */
export function zeroSpan(values: readonly number[], start: number, end: number): number[] {
  const out = values.slice();
  const a = Math.max(0, Math.floor(start));
  const b = Math.min(out.length, Math.ceil(end));
  for (let i = a; i < b; i++) out[i] = 0;
  return out;
}

export function regionMean(values: readonly number[], start: number, end: number): number {
  const a = Math.max(0, Math.floor(start));
  const b = Math.min(values.length, Math.ceil(end));
  if (b <= a) return 0;
  let sum = 0;
  for (let i = a; i < b; i++) sum += values[i] as number;
  return sum / (b - a);
}

export function curvesEqual(a: readonly number[], b: readonly number[]): boolean {
  return a.length === b.length && a.every((v, i) => Object.is(v, b[i]));
}

/** Undo/redo over curve snapshots.
 *
 * Snapshots are plain number arrays copied on the way in and out, so undo
 * restores the earlier curve bit for bit; nothing is recomputed.
 */
export class EditStack {
  private past: number[][] = [];
  private future: number[][] = [];

  constructor(private readonly limit = 200) {}

  get canUndo(): boolean {
    return this.past.length > 0;
  }

  get canRedo(): boolean {
    return this.future.length > 0;
  }

  /** Record the state that an incoming edit is about to replace. */
  push(snapshot: readonly number[]): void {
    this.past.push(snapshot.slice());
    if (this.past.length > this.limit) this.past.shift();
    this.future = [];
  }

  undo(current: readonly number[]): number[] | null {
    const previous = this.past.pop();
    if (previous === undefined) return null;
    this.future.push(current.slice());
    return previous.slice();
  }

  redo(current: readonly number[]): number[] | null {
    const next = this.future.pop();
    if (next === undefined) return null;
    this.past.push(current.slice());
    return next.slice();
  }

  clear(): void {
    this.past = [];
    this.future = [];
  }
}
