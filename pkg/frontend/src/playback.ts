// Frame playback clock: advances the cursor from wall-clock time without
// touching the render loop; pure update functions.

import type { Frame } from "./types.js";

export interface PlaybackState {
  playing: boolean;
  cursor: number;
  lastTickMs: number | null;
  speed: number; // 1 = real time given dt
}

export function initialPlayback(): PlaybackState {
  return { playing: false, cursor: 0, lastTickMs: null, speed: 1 };
}

export function play(p: PlaybackState): PlaybackState {
  return { ...p, playing: true, lastTickMs: null };
}

export function pause(p: PlaybackState): PlaybackState {
  return { ...p, playing: false, lastTickMs: null };
}

export function seek(p: PlaybackState, cursor: number, nFrames: number): PlaybackState {
  return { ...p, cursor: clamp(cursor, nFrames) };
}

function clamp(cursor: number, nFrames: number): number {
  if (nFrames <= 0) return 0;
  return Math.max(0, Math.min(Math.round(cursor), nFrames - 1));
}

/** Advance by wall-clock time; holds at the final frame. */
export function tick(
  p: PlaybackState, nowMs: number, nFrames: number, dtSeconds: number,
): PlaybackState {
  if (!p.playing || nFrames === 0) return p;
  if (p.lastTickMs === null) return { ...p, lastTickMs: nowMs };
  const elapsed = (nowMs - p.lastTickMs) / 1000;
  const stepF = (elapsed / dtSeconds) * p.speed;
  if (stepF < 1) return p;
  const cursor = clamp(p.cursor + Math.floor(stepF), nFrames);
  const playing = cursor < nFrames - 1;
  return { ...p, cursor, playing, lastTickMs: nowMs };
}

export function frameAt(frames: Frame[], cursor: number): Frame | null {
  if (frames.length === 0) return null;
  return frames[clamp(cursor, frames.length)];
}
