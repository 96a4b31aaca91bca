// DOM shell wiring the pure view/render/playback cores to the service.

import { Api, ApiError } from "./api.js";
import { initialPlayback, frameAt, pause as pbPause, play as pbPlay, seek, tick } from "./playback.js";
import { renderScene } from "./render.js";
import type { Frame, PriorsResponse, ScenarioDoc } from "./types.js";
import {
  buildGuidanceSpec,
  guidanceReady,
  GuidanceMode,
  initialView,
  panBy,
  pickAgent,
  screenToWorld,
  ViewState,
  zoomAt,
} from "./view.js";
import { LiveSession } from "./ws.js";

const api = new Api("");
const state: ViewState = initialView();
let playback = initialPlayback();
let scenarioId: string | null = null;
let scenario: ScenarioDoc | null = null;
let priors: PriorsResponse | null = null;
let baselineRollout: Frame[] | null = null; // unguided twin for the toggle
let live: LiveSession | null = null;
let liveFrames: Frame[] = [];

const canvas = document.getElementById("scene") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const statusEl = document.getElementById("status")!;
const scenarioSel = document.getElementById("scenario-select") as HTMLSelectElement;
const modeSel = document.getElementById("mode-select") as HTMLSelectElement;
const samplerSel = document.getElementById("sampler-select") as HTMLSelectElement;
const generateBtn = document.getElementById("generate") as HTMLButtonElement;
const playBtn = document.getElementById("play") as HTMLButtonElement;
const cursorInput = document.getElementById("cursor") as HTMLInputElement;
const toggleBtn = document.getElementById("toggle-rollout") as HTMLButtonElement;
const liveBtn = egoButton("live-start");
const livePauseBtn = egoButton("live-pause");
const liveGuideBtn = egoButton("live-guide");
const egoSel = document.getElementById("ego-select") as HTMLSelectElement;

function egoButton(id: string): HTMLButtonElement {
  return document.getElementById(id) as HTMLButtonElement;
}

function setStatus(text: string, isError = false): void {
  statusEl.textContent = text;
  statusEl.className = isError ? "error" : "";
}

function currentFrame(): Frame | null {
  if (liveFrames.length > 0) return liveFrames[liveFrames.length - 1];
  const frames = state.rollouts[state.activeRollout];
  if (frames && frames.length > 0) return frameAt(frames, playback.cursor);
  if (!scenario) return null;
  // frame 0 synthesized from agent current states
  return {
    t: 0,
    agents: scenario.agents.map((a) => {
      const cur = a.history[a.history.length - 1];
      return {
        id: a.id, x: cur[0], y: cur[1], psi: cur[2], v: Math.hypot(cur[3], cur[4]),
      };
    }),
  };
}

function refreshControls(): void {
  generateBtn.disabled = !scenario || !guidanceReady(state) || (state.mode !== "none" && state.selectedAgent === null);
  toggleBtn.disabled = state.rollouts.length < 2;
  toggleBtn.textContent = state.activeRollout === 0 ? "showing: guided" : "showing: unguided";
}

function draw(nowMs: number): void {
  const frames = state.rollouts[state.activeRollout] ?? [];
  playback = tick(playback, nowMs, frames.length, scenario?.dt ?? 0.1);
  cursorInput.max = String(Math.max(frames.length - 1, 0));
  cursorInput.value = String(playback.cursor);
  if (scenario) {
    const trails = frames.slice(0, playback.cursor);
    renderScene(ctx, canvas.width, canvas.height, state.camera, scenario, currentFrame(), {
      selectedAgent: state.selectedAgent,
      pursuerAgent: state.pursuerAgent,
      goal: state.selectedGoal,
      priors,
      trails: trails.length > 0 ? trails.filter((_, i) => i % 3 === 0) : null,
    });
  }
  requestAnimationFrame(draw);
}

async function loadScenarios(): Promise<void> {
  const listing = await api.listScenarios();
  scenarioSel.innerHTML = "";
  for (const s of listing.scenarios) {
    const opt = document.createElement("option");
    opt.value = s.id;
    opt.textContent = `${s.id} (${s.n_agents} agents)`;
    scenarioSel.appendChild(opt);
  }
  if (listing.scenarios.length > 0) {
    await selectScenario(listing.scenarios[0].id);
  }
}

async function selectScenario(id: string): Promise<void> {
  scenarioId = id;
  scenario = await api.getScenario(id);
  state.selectedAgent = null;
  state.pursuerAgent = null;
  state.selectedGoal = null;
  state.rollouts = [];
  liveFrames = [];
  priors = null;
  playback = initialPlayback();
  // frame the camera on the scene
  const xs = scenario.agents.map((a) => a.history[a.history.length - 1][0]);
  const ys = scenario.agents.map((a) => a.history[a.history.length - 1][1]);
  state.camera.cx = xs.reduce((a, b) => a + b, 0) / xs.length;
  state.camera.cy = ys.reduce((a, b) => a + b, 0) / ys.length;
  setStatus(`loaded ${id}`);
  refreshControls();
}

async function onCanvasClick(ev: MouseEvent): Promise<void> {
  if (!scenario) return;
  const rect = canvas.getBoundingClientRect();
  const [wx, wy] = screenToWorld(
    state.camera, canvas.width, canvas.height, ev.clientX - rect.left, ev.clientY - rect.top,
  );
  const frame = currentFrame();
  if (!frame) return;
  const hit = pickAgent(frame, scenario.agents, wx, wy);
  if (hit !== null) {
    if (state.mode === "adversarial" && state.selectedAgent !== null && hit !== state.selectedAgent) {
      state.pursuerAgent = hit;
      setStatus(`pursuer = agent ${hit}, evader = agent ${state.selectedAgent}`);
    } else {
      state.selectedAgent = hit;
      priors = null;
      if (state.mode === "goal" && scenarioId) {
        priors = await api.fetchPriors(scenarioId, hit);
        setStatus(`agent ${hit}: ${priors.modes.length} prior modes, click one or any point as goal`);
      } else if (state.mode === "conflict_prior" && scenarioId) {
        const pick = await api.conflictPrior(scenarioId, hit);
        if (pick.found && pick.agent_id !== undefined && pick.goal) {
          state.pursuerAgent = pick.agent_id;
          state.selectedGoal = pick.goal;
          setStatus(
            `conflict prior: agent ${pick.agent_id} steered to (${pick.goal[0].toFixed(1)}, ${pick.goal[1].toFixed(1)})`,
          );
        } else {
          state.pursuerAgent = null;
          state.selectedGoal = null;
          setStatus("no collision pairs from behavior priors for this ego", true);
        }
      } else {
        setStatus(`selected agent ${hit}`);
      }
    }
  } else if (state.mode === "goal" && state.selectedAgent !== null) {
    // snap to a prior mode endpoint when one is close, else free goal
    let goal: [number, number] = [wx, wy];
    if (priors) {
      for (const mode of priors.modes) {
        if (Math.hypot(mode.goal[0] - wx, mode.goal[1] - wy) < 2.5) {
          goal = mode.goal;
          break;
        }
      }
    }
    state.selectedGoal = goal;
    setStatus(`goal (${goal[0].toFixed(1)}, ${goal[1].toFixed(1)}) for agent ${state.selectedAgent}`);
  }
  refreshControls();
}

async function onGenerate(): Promise<void> {
  if (!scenarioId) return;
  const spec = buildGuidanceSpec(state);
  setStatus("generating…");
  generateBtn.disabled = true;
  try {
    const unguided = await api.generate({
      scenario_id: scenarioId, sampler: samplerSel.value, n_samples: 1, seed: 0,
    });
    baselineRollout = unguided.rollouts[0].frames;
    let guided = baselineRollout;
    if (spec) {
      const resp = await api.generate({
        scenario_id: scenarioId, guidance: spec, sampler: samplerSel.value, n_samples: 1, seed: 0,
      });
      guided = resp.rollouts[0].frames;
    }
    state.rollouts = spec ? [guided, baselineRollout] : [baselineRollout];
    state.activeRollout = 0;
    playback = pbPlay(seek(initialPlayback(), 0, guided.length));
    setStatus(spec ? "guided rollout ready (toggle compares unguided)" : "rollout ready");
  } catch (e) {
    const msg = e instanceof ApiError ? `${e.code}: ${e.message}` : String(e);
    setStatus(`generation failed — ${msg}`, true);
  } finally {
    refreshControls();
  }
}

function onLiveStart(): void {
  if (!scenarioId) return;
  liveFrames = [];
  live = new LiveSession(api.wsUrl(), {
    onFrame: (f) => {
      liveFrames.push(f);
    },
    onStatus: (s) => setStatus(`live: ${s}`),
    onError: (code, message) => setStatus(`live error ${code}: ${message}`, true),
    onClose: () => setStatus("live session closed"),
  });
  live
    .connect()
    .then(() => {
      live!.start(scenarioId!, {
        total_steps: scenario ? scenario.ground_truth_trajectories[0].states.length - 1 : 80,
        sampler: samplerSel.value,
        ego_planner: egoSel.value,
        rate_hz: 10,
      });
    })
    .catch(() => setStatus("live connection failed — retry", true));
}

function bind(): void {
  scenarioSel.addEventListener("change", () => void selectScenario(scenarioSel.value));
  modeSel.addEventListener("change", () => {
    state.mode = modeSel.value as GuidanceMode;
    state.selectedGoal = null;
    state.pursuerAgent = null;
    priors = null;
    refreshControls();
  });
  canvas.addEventListener("click", (ev) => void onCanvasClick(ev));
  canvas.addEventListener("wheel", (ev) => {
    ev.preventDefault();
    const rect = canvas.getBoundingClientRect();
    state.camera = zoomAt(
      state.camera, canvas.width, canvas.height,
      ev.clientX - rect.left, ev.clientY - rect.top, ev.deltaY < 0 ? 1.15 : 0.87,
    );
  });
  let dragging = false;
  canvas.addEventListener("mousedown", () => (dragging = true));
  window.addEventListener("mouseup", () => (dragging = false));
  canvas.addEventListener("mousemove", (ev) => {
    if (dragging && (ev.buttons & 1) === 1 && ev.shiftKey) {
      state.camera = panBy(state.camera, ev.movementX, ev.movementY);
    }
  });
  generateBtn.addEventListener("click", () => void onGenerate());
  playBtn.addEventListener("click", () => {
    playback = playback.playing ? pbPause(playback) : pbPlay(playback);
    playBtn.textContent = playback.playing ? "pause" : "play";
  });
  cursorInput.addEventListener("input", () => {
    const frames = state.rollouts[state.activeRollout] ?? [];
    playback = seek(pbPause(playback), Number(cursorInput.value), frames.length);
  });
  toggleBtn.addEventListener("click", () => {
    state.activeRollout = state.activeRollout === 0 ? 1 : 0;
    refreshControls();
  });
  liveBtn.addEventListener("click", onLiveStart);
  livePauseBtn.addEventListener("click", () => live?.pause());
  liveGuideBtn.addEventListener("click", () => {
    const spec = buildGuidanceSpec(state);
    live?.setGuidance(spec);
    setStatus(spec ? "guidance injected into the live session" : "live guidance cleared");
  });
  egoSel.addEventListener("change", () => live?.setEgoPlanner(egoSel.value));
}

bind();
void loadScenarios().catch((e) => setStatus(`failed to reach service: ${e}`, true));
requestAnimationFrame(draw);
