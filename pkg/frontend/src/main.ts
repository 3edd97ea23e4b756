// Console entry point: patient picker, timeline editor, scenario runs, and
// the A/B comparison pane. All numbers shown come from service responses.

import { Api, isAbort, ScenarioRunner, ServiceError } from "./api.js";
import { drawChart, EventMark, layoutChart, Series } from "./chart.js";
import { compareScenarios, formatDiff } from "./compare.js";
import { DraftError, ScenarioDraft } from "./edits.js";
import { decodePgm, Raster, rasterToRgba } from "./pgm.js";
import { TimelineEditor } from "./timeline.js";
import { PatientDetail, ScenarioResponse } from "./types.js";

const params = new URLSearchParams(location.search);
const api = new Api(params.get("service") ?? "http://127.0.0.1:8420");
const runner = new ScenarioRunner(api);

const el = (id: string) => document.getElementById(id) as HTMLElement;
const input = (id: string) => el(id) as HTMLInputElement;

let detail: PatientDetail | null = null;
let draft: ScenarioDraft | null = null;
let editor: TimelineEditor | null = null;
let baselineResponse: ScenarioResponse | null = null;
let pinned: ScenarioResponse | null = null; // scenario A for compare

function toast(message: string, isError = true) {
  const t = el("toast");
  t.textContent = message;
  t.className = isError ? "toast error" : "toast";
  t.style.opacity = "1";
  setTimeout(() => (t.style.opacity = "0"), 6000);
}

function surfaceError(err: unknown) {
  if (isAbort(err)) return;
  if (err instanceof ServiceError) {
    toast(`[${err.code}] ${err.message}${err.field ? ` (${err.field})` : ""}`);
  } else if (err instanceof DraftError) {
    toast(`invalid edit: ${err.message} (${err.field})`);
  } else {
    toast(String(err));
  }
}

// ------------------------------------------------------------------- patients

async function boot() {
  try {
    const health = await api.healthz();
    el("status").textContent = `service ${health.version}, cohort ${health.cohort_hash.slice(0, 12)}, ${health.n_patients} patients`;
    const patients = await api.patients();
    const sel = el("patient") as HTMLSelectElement;
    sel.innerHTML = "";
    for (const p of patients) {
      const opt = document.createElement("option");
      opt.value = p.id;
      opt.textContent = `${p.id} (${p.scan_days.length} scans)`;
      sel.appendChild(opt);
    }
    sel.addEventListener("change", () => loadPatient(sel.value));
    if (patients.length > 0) await loadPatient(patients[0].id);
  } catch (err) {
    surfaceError(err);
  }
}

async function loadPatient(pid: string) {
  try {
    detail = await api.patient(pid);
  } catch (err) {
    surfaceError(err);
    return;
  }
  pinned = null;
  baselineResponse = null;
  draft = new ScenarioDraft(pid, detail.timeline);
  const lastDay = detail.observations[detail.observations.length - 1].day;
  const horizon = Math.max(lastDay, Math.ceil(lastDay * 1.5));
  draft.horizon = horizon;
  input("horizon").value = String(horizon);

  const cov = detail.covariates;
  el("covariates").textContent = cov
    ? `age ${cov.age_years}, grade ${cov.grade}, ` +
      Object.entries(cov.markers)
        .filter(([, v]) => v === 1)
        .map(([k]) => k)
        .join(", ")
    : "no covariates";

  editor = new TimelineEditor(el("editor"), draft, {
    dayMax: horizon,
    onChange: () => void runScenario(),
    onError: surfaceError,
  });

  renderObservations(detail);
  await runScenario({ baseline: true });
}

function renderObservations(d: PatientDetail) {
  const strip = el("scans");
  strip.innerHTML = "";
  for (const obs of d.observations) {
    const card = document.createElement("div");
    card.className = "scan-card";
    const canvas = document.createElement("canvas");
    paintScan(canvas, obs.image_pgm_base64, obs.mask_pgm_base64);
    const cap = document.createElement("div");
    cap.textContent = `day ${obs.day}: ${obs.volume_mm2.toFixed(0)} mm\u00b2`;
    card.appendChild(canvas);
    card.appendChild(cap);
    strip.appendChild(card);
  }
}

/** Grayscale image underlay (if present) with the mask tinted on top.
 * Mask pixels are the exact bytes the service delivered. */
function paintScan(canvas: HTMLCanvasElement, imageB64: string | null, maskB64: string) {
  const mask = decodePgm(maskB64);
  canvas.width = mask.width;
  canvas.height = mask.height;
  canvas.style.width = `${mask.width * 3}px`;
  canvas.style.imageRendering = "pixelated";
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const base: Raster = imageB64 ? decodePgm(imageB64) : { ...mask, data: new Uint8Array(mask.data.length) };
  const under = ctx.createImageData(base.width, base.height);
  under.data.set(rasterToRgba(base, null));
  ctx.putImageData(under, 0, 0);
  const tint = ctx.createImageData(mask.width, mask.height);
  tint.data.set(rasterToRgba(mask, [214, 39, 40, 110]));
  const off = document.createElement("canvas");
  off.width = mask.width;
  off.height = mask.height;
  off.getContext("2d")?.putImageData(tint, 0, 0);
  ctx.drawImage(off, 0, 0);
}

// ------------------------------------------------------------------ scenarios

async function runScenario(opts: { baseline?: boolean } = {}) {
  if (!draft || !detail) return;
  const req = draft.toRequest();
  const tau = parseFloat(input("tau").value);
  // slider at the server default sends no override: masks pass through as-is
  if (!Number.isNaN(tau) && tau !== 0.5) {
    req.config = { ...(req.config ?? {}), tau };
  }
  const horizon = parseFloat(input("horizon").value);
  if (!Number.isNaN(horizon)) req.horizon = horizon;
  try {
    const resp = await runner.run(req);
    draft.lastResponse = resp;
    if (opts.baseline && !draft.dirty) baselineResponse = resp;
    renderScenario(resp);
  } catch (err) {
    surfaceError(err);
  }
}

function renderScenario(resp: ScenarioResponse) {
  if (!detail) return;
  const series: Series[] = [
    {
      label: "observed",
      days: detail.baseline_curve.days,
      values: detail.baseline_curve.volumes_mm2,
      color: "#555",
      dashed: true,
    },
  ];
  if (pinned) {
    series.push({
      label: pinned.patient_id === resp.patient_id ? "scenario A" : "pinned",
      days: pinned.curve.days,
      values: pinned.curve.volumes_mm2,
      color: "#888",
    });
  }
  if (baselineResponse && baselineResponse !== resp) {
    series.push({
      label: "baseline",
      days: baselineResponse.curve.days,
      values: baselineResponse.curve.volumes_mm2,
      color: "#2166ac",
    });
  }
  series.push({
    label: "scenario",
    days: resp.curve.days,
    values: resp.curve.volumes_mm2,
    color: "#d62728",
  });

  const canvas = el("chart") as HTMLCanvasElement;
  const ctx = canvas.getContext("2d");
  if (ctx) {
    const marks: EventMark[] = [
      ...resp.timeline.surgeries.map((s) => ({ day: s.day, label: "S", color: "#b5541c" })),
      ...resp.timeline.rt.map((f) => ({ day: f.day, label: "RT", color: "#2166ac" })),
      ...resp.timeline.chemo.map((c) => ({ day: c.start_day, label: "C", color: "#1a7a3c" })),
    ];
    drawChart(ctx, layoutChart(series, canvas.width, canvas.height), series, marks);
  }

  const stats = [
    `final ${resp.curve.volumes_mm2[resp.curve.volumes_mm2.length - 1].toFixed(1)} mm\u00b2 @ day ${resp.horizon}`,
    resp.ttp_days !== null ? `TTP ${resp.ttp_days.toFixed(1)} d` : "no progression",
    resp.dsc_vs_last_obs !== null ? `DSC vs last scan ${resp.dsc_vs_last_obs.toFixed(3)}` : null,
  ].filter((s): s is string => s !== null);
  el("stats").textContent = stats.join("   ");

  const maskBox = el("pred-masks");
  maskBox.innerHTML = "";
  for (const m of resp.masks) {
    const card = document.createElement("div");
    card.className = "scan-card";
    const canvas2 = document.createElement("canvas");
    paintScan(canvas2, null, m.pgm_base64);
    const cap = document.createElement("div");
    cap.textContent = `predicted, day ${m.day}`;
    card.appendChild(canvas2);
    card.appendChild(cap);
    maskBox.appendChild(card);
  }

  if (pinned && draft?.lastResponse) {
    el("diff").textContent = formatDiff(compareScenarios(pinned, draft.lastResponse));
  } else {
    el("diff").textContent = "";
  }
}

// -------------------------------------------------------------------- wiring

export function wire() {
  el("run").addEventListener("click", () => void runScenario());
  el("pin").addEventListener("click", () => {
    if (draft?.lastResponse) {
      pinned = draft.lastResponse;
      toast(`pinned ${draft.label} as scenario A`, false);
      renderScenario(draft.lastResponse);
    }
  });
  el("reset").addEventListener("click", () => {
    if (!draft || !editor) return;
    draft.reset();
    editor.render();
    void runScenario({ baseline: true });
  });
  el("drop-rt").addEventListener("click", () => {
    if (!draft || !editor) return;
    draft.removeAllRt();
    editor.render();
    void runScenario();
  });
  input("tau").addEventListener("change", () => void runScenario());
  input("horizon").addEventListener("change", () => void runScenario());
  void boot();
}

if (typeof document !== "undefined" && document.getElementById("patient")) {
  wire();
}
