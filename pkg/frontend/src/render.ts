// Canvas drawing as pure functions over a minimal 2D context interface, so
// tests drive them with a recording mock. Same inputs draw the same calls.

import type { Frame, PolylineDoc, PriorsResponse, ScenarioDoc } from "./types.js";
import { Camera, worldToScreen } from "./view.js";

export interface Draw2D {
  fillStyle: string | CanvasGradient | CanvasPattern;
  strokeStyle: string | CanvasGradient | CanvasPattern;
  lineWidth: number;
  globalAlpha: number;
  font: string;
  clearRect(x: number, y: number, w: number, h: number): void;
  fillRect(x: number, y: number, w: number, h: number): void;
  beginPath(): void;
  moveTo(x: number, y: number): void;
  lineTo(x: number, y: number): void;
  closePath(): void;
  arc(x: number, y: number, r: number, a0: number, a1: number): void;
  stroke(): void;
  fill(): void;
  setLineDash(segments: number[]): void;
  fillText(text: string, x: number, y: number): void;
}

export interface RenderOverlay {
  selectedAgent?: number | null;
  pursuerAgent?: number | null;
  goal?: [number, number] | null;
  priors?: PriorsResponse | null;
  trails?: Frame[] | null; // faded positions up to the cursor
}

const LIGHT_COLORS: Record<string, string> = {
  red: "#e74c3c",
  yellow: "#f1c40f",
  green: "#2ecc71",
  unknown: "#95a5a6",
};

const AGENT_COLORS = [
  "#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#b07aa1", "#76b7b2", "#edc948", "#ff9da7",
];

export function agentColor(id: number): string {
  return AGENT_COLORS[((id % AGENT_COLORS.length) + AGENT_COLORS.length) % AGENT_COLORS.length];
}

function path(ctx: Draw2D, cam: Camera, w: number, h: number, pts: number[][]): void {
  ctx.beginPath();
  pts.forEach((p, i) => {
    const [sx, sy] = worldToScreen(cam, w, h, p[0], p[1]);
    if (i === 0) ctx.moveTo(sx, sy);
    else ctx.lineTo(sx, sy);
  });
}

export function drawPolyline(
  ctx: Draw2D, cam: Camera, w: number, h: number, pl: PolylineDoc,
): void {
  if (pl.waypoints.length < 2) return;
  path(ctx, cam, w, h, pl.waypoints);
  if (pl.lane_kind === "road_edge") {
    ctx.setLineDash([]);
    ctx.strokeStyle = "#2c3e50";
    ctx.lineWidth = 2;
  } else if (pl.lane_kind === "lane_center") {
    ctx.setLineDash([6, 6]);
    ctx.strokeStyle = "#b8c0c8";
    ctx.lineWidth = 1;
  } else {
    ctx.setLineDash([2, 4]);
    ctx.strokeStyle = "#8e44ad";
    ctx.lineWidth = 1;
  }
  ctx.stroke();
  ctx.setLineDash([]);
}

export function drawAgentBox(
  ctx: Draw2D, cam: Camera, w: number, h: number,
  x: number, y: number, psi: number, length: number, width: number,
  color: string, highlight: boolean,
): void {
  const c = Math.cos(psi);
  const s = Math.sin(psi);
  const corners: [number, number][] = (
    [
      [length / 2, width / 2],
      [length / 2, -width / 2],
      [-length / 2, -width / 2],
      [-length / 2, width / 2],
    ] as [number, number][]
  ).map(([lx, ly]) => [x + lx * c - ly * s, y + lx * s + ly * c]);
  path(ctx, cam, w, h, corners);
  ctx.closePath();
  ctx.fillStyle = color;
  ctx.fill();
  ctx.strokeStyle = highlight ? "#111" : "#ffffff";
  ctx.lineWidth = highlight ? 2.5 : 1;
  ctx.stroke();
  // heading chevron at the nose
  const nose: [number, number] = [x + (length / 2) * c, y + (length / 2) * s];
  const tipL: [number, number] = [x + (length / 4) * c - (width / 2) * s, y + (length / 4) * s + (width / 2) * c];
  const tipR: [number, number] = [x + (length / 4) * c + (width / 2) * s, y + (length / 4) * s - (width / 2) * c];
  path(ctx, cam, w, h, [tipL, nose, tipR]);
  ctx.strokeStyle = "#ffffff";
  ctx.lineWidth = 1;
  ctx.stroke();
}

export function renderScene(
  ctx: Draw2D,
  width: number,
  height: number,
  cam: Camera,
  scenario: ScenarioDoc,
  frame: Frame | null,
  overlay: RenderOverlay = {},
): void {
  ctx.globalAlpha = 1;
  ctx.clearRect(0, 0, width, height);
  ctx.fillStyle = "#f4f6f8";
  ctx.fillRect(0, 0, width, height);
  for (const pl of scenario.polylines) drawPolyline(ctx, cam, width, height, pl);
  for (const lt of scenario.lights) {
    const [sx, sy] = worldToScreen(cam, width, height, lt.x, lt.y);
    ctx.beginPath();
    ctx.arc(sx, sy, 5, 0, Math.PI * 2);
    ctx.fillStyle = LIGHT_COLORS[lt.state] ?? LIGHT_COLORS.unknown;
    ctx.fill();
    ctx.strokeStyle = "#333";
    ctx.lineWidth = 1;
    ctx.stroke();
  }
  if (overlay.priors) {
    for (const mode of overlay.priors.modes) {
      ctx.globalAlpha = 0.15 + 0.85 * mode.probability;
      path(ctx, cam, width, height, mode.states);
      ctx.strokeStyle = "#d35400";
      ctx.lineWidth = 2;
      ctx.stroke();
      const [gx, gy] = worldToScreen(cam, width, height, mode.goal[0], mode.goal[1]);
      ctx.beginPath();
      ctx.arc(gx, gy, 4, 0, Math.PI * 2);
      ctx.fillStyle = "#d35400";
      ctx.fill();
    }
    ctx.globalAlpha = 1;
  }
  if (overlay.trails) {
    ctx.globalAlpha = 0.3;
    for (const past of overlay.trails) {
      for (const ag of past.agents) {
        const [sx, sy] = worldToScreen(cam, width, height, ag.x, ag.y);
        ctx.beginPath();
        ctx.arc(sx, sy, 1.5, 0, Math.PI * 2);
        ctx.fillStyle = agentColor(ag.id);
        ctx.fill();
      }
    }
    ctx.globalAlpha = 1;
  }
  if (frame) {
    const dims = new Map(scenario.agents.map((a) => [a.id, [a.length, a.width] as const]));
    for (const ag of frame.agents) {
      const [len, wid] = dims.get(ag.id) ?? [4.5, 2.0];
      const highlight = ag.id === overlay.selectedAgent || ag.id === overlay.pursuerAgent;
      drawAgentBox(ctx, cam, width, height, ag.x, ag.y, ag.psi, len, wid, agentColor(ag.id), !!highlight);
    }
  }
  if (overlay.goal) {
    const [sx, sy] = worldToScreen(cam, width, height, overlay.goal[0], overlay.goal[1]);
    ctx.beginPath();
    ctx.arc(sx, sy, 7, 0, Math.PI * 2);
    ctx.strokeStyle = "#c0392b";
    ctx.lineWidth = 2;
    ctx.stroke();
    ctx.beginPath();
    ctx.moveTo(sx - 9, sy);
    ctx.lineTo(sx + 9, sy);
    ctx.moveTo(sx, sy - 9);
    ctx.lineTo(sx, sy + 9);
    ctx.stroke();
  }
}
