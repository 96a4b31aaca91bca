// Thin HTTP client over the service JSON contract. Errors surface as
// ApiError with the structured {code, message} body when present.

import type {
  GenerateRequest,
  GenerateResponse,
  PriorsResponse,
  ScenarioDoc,
  ScenarioSummary,
} from "./types.js";

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function request<T>(base: string, path: string, init?: RequestInit): Promise<T> {
  const resp = await fetch(base + path, {
    headers: { "content-type": "application/json" },
    ...init,
  });
  if (!resp.ok) {
    let code = "http_error";
    let message = `${resp.status} ${resp.statusText}`;
    try {
      const body = await resp.json();
      code = body.code ?? code;
      message = body.message ?? message;
    } catch {
      // non-JSON error body
    }
    throw new ApiError(resp.status, code, message);
  }
  return (await resp.json()) as T;
}

export class Api {
  constructor(public base: string = "") {}

  listScenarios(): Promise<{ scenarios: ScenarioSummary[] }> {
    return request(this.base, "/api/scenarios");
  }

  getScenario(id: string): Promise<ScenarioDoc> {
    return request(this.base, `/api/scenarios/${id}`);
  }

  fetchPriors(scenarioId: string, agentId: number): Promise<PriorsResponse> {
    return request(this.base, "/api/priors", {
      method: "POST",
      body: JSON.stringify({ scenario_id: scenarioId, agent_id: agentId }),
    });
  }

  generate(req: GenerateRequest): Promise<GenerateResponse> {
    return request(this.base, "/api/generate", { method: "POST", body: JSON.stringify(req) });
  }

  conflictPrior(
    scenarioId: string,
    egoAgent: number,
  ): Promise<{ found: boolean; agent_id?: number; goal?: [number, number]; score?: number }> {
    return request(this.base, "/api/conflict_prior", {
      method: "POST",
      body: JSON.stringify({ scenario_id: scenarioId, ego_agent: egoAgent }),
    });
  }

  wsUrl(): string {
    const base = this.base || (typeof location !== "undefined" ? location.origin : "");
    return base.replace(/^http/, "ws") + "/api/simulate";
  }
}
