// Camera math, hit testing, and the editor view state. World frame is y-up
// meters; screen is y-down pixels. Everything here is pure so it can be
// tested without a DOM.

import type { AgentDoc, Frame, GuidanceSpecWire } from "./types.js";

export interface Camera {
  cx: number; // world meters at the screen center
  cy: number;
  scale: number; // pixels per meter
}

export type GuidanceMode =
  | "none"
  | "goal"
  | "rush"
  | "collision_avoid"
  | "conflict_prior"
  | "adversarial";

export interface ViewState {
  camera: Camera;
  selectedAgent: number | null;
  pursuerAgent: number | null; // adversarial mode second pick
  selectedGoal: [number, number] | null;
  mode: GuidanceMode;
  cursor: number; // playback frame index
  rollouts: Frame[][]; // loaded rollouts (e.g. [unguided, guided])
  activeRollout: number;
}

export function initialView(): ViewState {
  return {
    camera: { cx: 0, cy: 0, scale: 6 },
    selectedAgent: null,
    pursuerAgent: null,
    selectedGoal: null,
    mode: "none",
    cursor: 0,
    rollouts: [],
    activeRollout: 0,
  };
}

export function worldToScreen(
  cam: Camera, width: number, height: number, x: number, y: number,
): [number, number] {
  return [width / 2 + (x - cam.cx) * cam.scale, height / 2 - (y - cam.cy) * cam.scale];
}

export function screenToWorld(
  cam: Camera, width: number, height: number, sx: number, sy: number,
): [number, number] {
  return [cam.cx + (sx - width / 2) / cam.scale, cam.cy - (sy - height / 2) / cam.scale];
}

export function panBy(cam: Camera, dxPx: number, dyPx: number): Camera {
  return { cx: cam.cx - dxPx / cam.scale, cy: cam.cy + dyPx / cam.scale, scale: cam.scale };
}

/** Zoom keeping the world point under the pointer fixed. */
export function zoomAt(
  cam: Camera, width: number, height: number, sx: number, sy: number, factor: number,
): Camera {
  const [wx, wy] = screenToWorld(cam, width, height, sx, sy);
  const scale = Math.min(80, Math.max(0.5, cam.scale * factor));
  const cx = wx - (sx - width / 2) / scale;
  const cy = wy + (sy - height / 2) / scale;
  return { cx, cy, scale };
}

export function pointInOrientedBox(
  px: number, py: number, cx: number, cy: number, heading: number, length: number, width: number,
): boolean {
  const c = Math.cos(heading);
  const s = Math.sin(heading);
  const dx = px - cx;
  const dy = py - cy;
  const lx = dx * c + dy * s;
  const ly = -dx * s + dy * c;
  return Math.abs(lx) <= length / 2 && Math.abs(ly) <= width / 2;
}

/** Nearest agent whose box contains the click; falls back to the nearest
 * center within 3 m so small boxes stay clickable. */
export function pickAgent(
  frame: Frame, agents: AgentDoc[], wx: number, wy: number,
): number | null {
  const dims = new Map(agents.map((a) => [a.id, [a.length, a.width] as const]));
  let best: number | null = null;
  let bestD = Infinity;
  for (const st of frame.agents) {
    const [len, wid] = dims.get(st.id) ?? [4.5, 2.0];
    const d = Math.hypot(st.x - wx, st.y - wy);
    if (pointInOrientedBox(wx, wy, st.x, st.y, st.psi, len, wid)) {
      if (d < bestD) {
        best = st.id;
        bestD = d;
      }
    }
  }
  if (best !== null) return best;
  for (const st of frame.agents) {
    const d = Math.hypot(st.x - wx, st.y - wy);
    if (d < 3.0 && d < bestD) {
      best = st.id;
      bestD = d;
    }
  }
  return best;
}

export function clampCursor(state: ViewState): number {
  const frames = state.rollouts[state.activeRollout];
  if (!frames || frames.length === 0) return 0;
  return Math.max(0, Math.min(state.cursor, frames.length - 1));
}

export function frameAtCursor(state: ViewState): Frame | null {
  const frames = state.rollouts[state.activeRollout];
  if (!frames || frames.length === 0) return null;
  return frames[clampCursor(state)];
}

/** Whether the guidance controls are actionable in the current state. */
export function guidanceReady(state: ViewState): boolean {
  switch (state.mode) {
    case "none":
      return true;
    case "goal":
      return state.selectedAgent !== null && state.selectedGoal !== null;
    case "rush":
      return state.selectedAgent !== null;
    case "collision_avoid":
      return true;
    case "conflict_prior":
      return state.selectedAgent !== null; // ego pick
    case "adversarial":
      return (
        state.selectedAgent !== null &&
        state.pursuerAgent !== null &&
        state.selectedAgent !== state.pursuerAgent
      );
  }
}

/** Build the guidance spec for the current selection; null = unguided. */
export function buildGuidanceSpec(state: ViewState): GuidanceSpecWire | null {
  if (!guidanceReady(state)) return null;
  switch (state.mode) {
    case "none":
      return null;
    case "goal":
      return {
        terms: [
          { kind: "goal", agents: [state.selectedAgent!], goals: [state.selectedGoal!] },
        ],
      };
    case "rush":
      return { terms: [{ kind: "rush", agents: [state.selectedAgent!] }] };
    case "collision_avoid":
      return { terms: [{ kind: "collision_avoid" }] };
    case "conflict_prior":
      // the goal is filled from the service's conflict-prior pick
      return state.selectedGoal
        ? { terms: [{ kind: "goal", agents: [state.pursuerAgent!], goals: [state.selectedGoal] }] }
        : null;
    case "adversarial":
      return {
        terms: [],
        game: { evader: state.selectedAgent!, pursuer: state.pursuerAgent! },
      };
  }
}
