// Wire types mirroring the service JSON contract.

export interface AgentFrameState {
  id: number;
  x: number;
  y: number;
  psi: number;
  v: number;
}

export interface Frame {
  t: number;
  agents: AgentFrameState[];
}

export interface ScenarioSummary {
  id: string;
  n_agents: number;
  horizon: number;
  dt: number;
  n_polylines: number;
  n_lights: number;
}

export interface AgentDoc {
  id: number;
  kind: "vehicle" | "pedestrian" | "cyclist";
  length: number;
  width: number;
  height: number;
  valid_now: boolean;
  history: number[][]; // rows of [x, y, psi, vx, vy]
  history_valid: boolean[];
}

export type LaneKind = "lane_center" | "road_edge" | "crosswalk";
export type LightState = "red" | "yellow" | "green" | "unknown";

export interface PolylineDoc {
  lane_kind: LaneKind;
  controlling_light: number | null;
  waypoints: number[][]; // rows of [x, y, dir]
}

export interface LightDoc {
  x: number;
  y: number;
  state: LightState;
}

export interface ScenarioDoc {
  version: number;
  dt: number;
  agents: AgentDoc[];
  polylines: PolylineDoc[];
  lights: LightDoc[];
  ground_truth_trajectories: { agent_id: number; states: number[][] }[];
}

export interface PriorMode {
  probability: number;
  goal: [number, number];
  states: number[][]; // rows of [x, y, psi, v]
}

export interface PriorsResponse {
  agent_id: number;
  modes: PriorMode[];
}

export interface GuidanceTermWire {
  kind: "goal" | "collision_avoid" | "onroad" | "rush";
  agents?: number[] | null;
  weight?: number;
  goals?: number[][] | null;
  overlap_threshold?: number;
}

export interface GameSpecWire {
  evader: number;
  pursuer: number;
  descent_steps?: number;
  ascent_steps?: number;
  outer_steps?: number;
  strength?: number;
}

export interface GuidanceSpecWire {
  terms: GuidanceTermWire[];
  n_grad_steps?: number;
  strength?: number;
  placement?: "on_mean" | "through_denoiser";
  game?: GameSpecWire | null;
}

export interface GenerateRequest {
  scenario_id: string;
  guidance?: GuidanceSpecWire | null;
  sampler?: string;
  n_samples?: number;
  seed?: number;
}

export interface RolloutWire {
  frames: Frame[];
}

export interface GenerateResponse {
  rollouts: RolloutWire[];
  metrics?: Record<string, unknown>;
}
