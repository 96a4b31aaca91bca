import { describe, expect, it } from "vitest";

import type { Draw2D } from "../src/render.js";
import { renderScene } from "../src/render.js";
import type { Frame, ScenarioDoc } from "../src/types.js";

/** Records every draw call; snapshot-equality of two recordings means the
 * same pixels for the same backend. */
export class RecordingContext implements Draw2D {
  calls: unknown[][] = [];
  private _fillStyle: string | CanvasGradient | CanvasPattern = "";
  private _strokeStyle: string | CanvasGradient | CanvasPattern = "";
  private _lineWidth = 1;
  private _globalAlpha = 1;
  private _font = "";

  set fillStyle(v: string | CanvasGradient | CanvasPattern) {
    this._fillStyle = v;
    this.calls.push(["fillStyle", v]);
  }
  get fillStyle() {
    return this._fillStyle;
  }
  set strokeStyle(v: string | CanvasGradient | CanvasPattern) {
    this._strokeStyle = v;
    this.calls.push(["strokeStyle", v]);
  }
  get strokeStyle() {
    return this._strokeStyle;
  }
  set lineWidth(v: number) {
    this._lineWidth = v;
    this.calls.push(["lineWidth", v]);
  }
  get lineWidth() {
    return this._lineWidth;
  }
  set globalAlpha(v: number) {
    this._globalAlpha = v;
    this.calls.push(["globalAlpha", v]);
  }
  get globalAlpha() {
    return this._globalAlpha;
  }
  set font(v: string) {
    this._font = v;
  }
  get font() {
    return this._font;
  }
  clearRect(...a: number[]) {
    this.calls.push(["clearRect", ...a]);
  }
  fillRect(...a: number[]) {
    this.calls.push(["fillRect", ...a]);
  }
  beginPath() {
    this.calls.push(["beginPath"]);
  }
  moveTo(x: number, y: number) {
    this.calls.push(["moveTo", x, y]);
  }
  lineTo(x: number, y: number) {
    this.calls.push(["lineTo", x, y]);
  }
  closePath() {
    this.calls.push(["closePath"]);
  }
  arc(...a: number[]) {
    this.calls.push(["arc", ...a]);
  }
  stroke() {
    this.calls.push(["stroke"]);
  }
  fill() {
    this.calls.push(["fill"]);
  }
  setLineDash(d: number[]) {
    this.calls.push(["setLineDash", ...d]);
  }
  fillText(t: string, x: number, y: number) {
    this.calls.push(["fillText", t, x, y]);
  }
}

export function fixtureScenario(nAgents = 2): ScenarioDoc {
  const agents = Array.from({ length: nAgents }, (_, i) => ({
    id: i,
    kind: "vehicle" as const,
    length: 4.5,
    width: 2.0,
    height: 1.6,
    valid_now: true,
    history: [[4 * i, 0, 0, 2, 0]],
    history_valid: [true],
  }));
  return {
    version: 1,
    dt: 0.1,
    agents,
    polylines: [
      { lane_kind: "lane_center", controlling_light: null, waypoints: [[-50, 0, 0], [50, 0, 0]] },
      { lane_kind: "road_edge", controlling_light: null, waypoints: [[-50, -4, 0], [50, -4, 0]] },
      { lane_kind: "road_edge", controlling_light: null, waypoints: [[50, 4, Math.PI], [-50, 4, Math.PI]] },
    ],
    lights: [{ x: 20, y: 0, state: "green" }],
    ground_truth_trajectories: agents.map((a) => ({ agent_id: a.id, states: [[4 * a.id, 0, 0, 2, 0]] })),
  };
}

export function fixtureFrame(nAgents = 2, t = 0): Frame {
  return {
    t,
    agents: Array.from({ length: nAgents }, (_, i) => ({
      id: i, x: 4 * i + t * 0.2, y: 0, psi: 0, v: 2,
    })),
  };
}

const cam = { cx: 0, cy: 0, scale: 6 };

describe("renderScene", () => {
  it("is a pure function: identical inputs draw identical call sequences", () => {
    const a = new RecordingContext();
    const b = new RecordingContext();
    renderScene(a, 640, 480, cam, fixtureScenario(), fixtureFrame(), { selectedAgent: 1 });
    renderScene(b, 640, 480, cam, fixtureScenario(), fixtureFrame(), { selectedAgent: 1 });
    expect(a.calls).toEqual(b.calls);
  });

  it("draws every agent, polyline, and light", () => {
    const ctx = new RecordingContext();
    const scenario = fixtureScenario(3);
    renderScene(ctx, 640, 480, cam, scenario, fixtureFrame(3));
    const strokes = ctx.calls.filter((c) => c[0] === "stroke").length;
    // 3 polylines + 3 agent boxes + 3 chevrons + 1 light ring at minimum
    expect(strokes).toBeGreaterThanOrEqual(10);
    const dashed = ctx.calls.filter((c) => c[0] === "setLineDash" && c.length > 1);
    expect(dashed.length).toBeGreaterThan(0); // lane centers are dashed
  });

  it("prior overlays draw one path per mode with probability opacity", () => {
    const ctx = new RecordingContext();
    const priors = {
      agent_id: 0,
      modes: [
        { probability: 0.7, goal: [5, 0] as [number, number], states: [[1, 0, 0, 1], [5, 0, 0, 1]] },
        { probability: 0.3, goal: [5, 3] as [number, number], states: [[1, 0, 0, 1], [5, 3, 0, 1]] },
      ],
    };
    renderScene(ctx, 640, 480, cam, fixtureScenario(), fixtureFrame(), { priors });
    const alphas = ctx.calls
      .filter((c) => c[0] === "globalAlpha")
      .map((c) => c[1] as number);
    expect(alphas).toContain(0.15 + 0.85 * 0.7);
    expect(alphas).toContain(0.15 + 0.85 * 0.3);
    // two mode endpoints drawn as arcs plus the light
    const arcs = ctx.calls.filter((c) => c[0] === "arc").length;
    expect(arcs).toBeGreaterThanOrEqual(3);
  });

  it("playback frame at cursor t draws exactly that frame's positions", () => {
    const ctx = new RecordingContext();
    const frame = fixtureFrame(1, 10);
    renderScene(ctx, 640, 480, cam, fixtureScenario(1), frame);
    // agent 0 at x = 2.0 world -> 640/2 + 2*6 = 332 on screen
    const moves = ctx.calls.filter((c) => c[0] === "moveTo" || c[0] === "lineTo");
    const near = moves.some((c) => Math.abs((c[1] as number) - (320 + frame.agents[0].x * 6)) < 4.5 * 6);
    expect(near).toBe(true);
  });
});

describe("render throughput", () => {
  it("renders a 32-agent scene above the 30 fps budget on a mock backend", () => {
    const scenario = fixtureScenario(32);
    const frame = fixtureFrame(32);
    const ctx = new RecordingContext();
    const n = 120;
    const t0 = performance.now();
    for (let i = 0; i < n; i++) {
      ctx.calls.length = 0;
      renderScene(ctx, 1280, 760, cam, scenario, frame, {});
    }
    const perFrameMs = (performance.now() - t0) / n;
    expect(perFrameMs).toBeLessThan(1000 / 30);
  });
});
