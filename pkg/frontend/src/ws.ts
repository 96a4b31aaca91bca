// Live simulation session over the service WebSocket. Messages queue through
// handlers; the caller applies frames on its own animation cadence.

import type { Frame, GuidanceSpecWire } from "./types.js";

export interface LiveHandlers {
  onFrame?: (frame: Frame) => void;
  onStatus?: (status: string, detail?: unknown) => void;
  onError?: (code: string, message: string) => void;
  onClose?: () => void;
}

export interface LiveStartConfig {
  total_steps?: number;
  replan_interval?: number;
  sampler?: string;
  ego_planner?: string;
  seed?: number;
  rate_hz?: number;
  max_speed?: boolean;
}

export class LiveSession {
  private ws: WebSocket | null = null;

  constructor(
    private url: string,
    private handlers: LiveHandlers,
  ) {}

  connect(): Promise<void> {
    return new Promise((resolve, reject) => {
      const ws = new WebSocket(this.url);
      this.ws = ws;
      ws.onopen = () => resolve();
      ws.onerror = () => reject(new Error("websocket connection failed"));
      ws.onclose = () => this.handlers.onClose?.();
      ws.onmessage = (ev) => this.dispatch(String(ev.data));
    });
  }

  private dispatch(raw: string): void {
    let msg: any;
    try {
      msg = JSON.parse(raw);
    } catch {
      return;
    }
    switch (msg.type) {
      case "frame":
        this.handlers.onFrame?.(msg.frame as Frame);
        break;
      case "error":
        this.handlers.onError?.(msg.code ?? "error", msg.message ?? "");
        break;
      default:
        this.handlers.onStatus?.(msg.type, msg);
    }
  }

  private send(payload: Record<string, unknown>): void {
    this.ws?.send(JSON.stringify(payload));
  }

  start(scenarioId: string, config: LiveStartConfig = {}): void {
    this.send({ cmd: "start", scenario_id: scenarioId, config });
  }

  pause(): void {
    this.send({ cmd: "pause" });
  }

  resume(): void {
    this.send({ cmd: "resume" });
  }

  setGuidance(spec: GuidanceSpecWire | null): void {
    this.send({ cmd: "set_guidance", spec });
  }

  setEgoPlanner(planner: string): void {
    this.send({ cmd: "set_ego_planner", planner });
  }

  stop(): void {
    this.send({ cmd: "stop" });
    this.ws?.close();
    this.ws = null;
  }
}
