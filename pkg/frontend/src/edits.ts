// Scenario drafts: an ordered edit-op list plus a local echo of the timeline
// those ops produce. The echo replicates the server's semantics exactly
// (arrays re-sorted by day after every op, indices addressing the sorted
// order), so what the editor shows is what the service will compute, and the
// op list serializes to a /whatif request unchanged.

import {
  ChemoDoc,
  ConfigOverrides,
  EditOp,
  ParamOverrides,
  RtDoc,
  ScenarioRequest,
  ScenarioResponse,
  SurgeryDoc,
  SurgeryMode,
  SURGERY_MODES,
  TimelineDoc,
} from "./types.js";

export class DraftError extends Error {
  field: string;

  constructor(message: string, field: string) {
    super(message);
    this.field = field;
  }
}

function requireFinite(v: number, what: string, field: string) {
  if (typeof v !== "number" || !Number.isFinite(v)) {
    throw new DraftError(`${what} must be a finite number, got ${v}`, field);
  }
}

function cloneTimeline(tl: TimelineDoc): TimelineDoc {
  return {
    surgeries: tl.surgeries.map((s) => ({ ...s })),
    rt: tl.rt.map((f) => ({ ...f })),
    chemo: tl.chemo.map((c) => ({ ...c })),
  };
}

export class ScenarioDraft {
  readonly patientId: string;
  label: string;
  lastResponse: ScenarioResponse | null = null;
  params: ParamOverrides = {};
  config: ConfigOverrides = {};
  horizon: number | null = null;
  maskDays: number[] | null = null;

  private baseline: TimelineDoc;
  private ops: EditOp[] = [];
  private echo: TimelineDoc;

  constructor(patientId: string, baseline: TimelineDoc, label = "scenario") {
    this.patientId = patientId;
    this.label = label;
    this.baseline = cloneTimeline(baseline);
    this.echo = cloneTimeline(baseline);
  }

  /** Current timeline as the server would echo it (day-sorted). */
  get timeline(): TimelineDoc {
    return cloneTimeline(this.echo);
  }

  get edits(): EditOp[] {
    return this.ops.map((op) => ({ ...op }));
  }

  get dirty(): boolean {
    return this.ops.length > 0;
  }

  reset() {
    this.ops = [];
    this.echo = cloneTimeline(this.baseline);
    this.lastResponse = null;
  }

  // ------------------------------------------------------------- RT fractions

  addRt(day: number, dose: number) {
    requireFinite(day, "rt day", "day");
    requireFinite(dose, "rt dose", "dose");
    if (dose <= 0) throw new DraftError(`rt dose must be > 0, got ${dose}`, "dose");
    this.push({ op: "add_rt", day, dose });
    this.echo.rt.push({ day, dose });
    this.resort();
  }

  removeRt(index: number) {
    this.checkIndex(this.echo.rt.length, index, "rt");
    this.push({ op: "remove_rt", index });
    this.echo.rt.splice(index, 1);
  }

  removeAllRt() {
    this.push({ op: "remove_rt", all: true });
    this.echo.rt = [];
  }

  moveRt(index: number, day: number) {
    this.checkIndex(this.echo.rt.length, index, "rt");
    requireFinite(day, "rt day", "day");
    this.push({ op: "move_rt", index, day });
    this.echo.rt[index] = { day, dose: this.echo.rt[index].dose };
    this.resort();
  }

  setRtDose(index: number, dose: number) {
    this.checkIndex(this.echo.rt.length, index, "rt");
    requireFinite(dose, "rt dose", "dose");
    if (dose <= 0) throw new DraftError(`rt dose must be > 0, got ${dose}`, "dose");
    this.push({ op: "set_rt_dose", index, dose });
    this.echo.rt[index] = { day: this.echo.rt[index].day, dose };
    this.resort();
  }

  // ---------------------------------------------------------------- surgeries

  addSurgery(day: number, mode: SurgeryMode = "Mul", resectFraction = 0.95) {
    requireFinite(day, "surgery day", "day");
    if (!SURGERY_MODES.includes(mode)) {
      throw new DraftError(`surgery mode must be one of ${SURGERY_MODES.join(", ")}`, "mode");
    }
    requireFinite(resectFraction, "resect_fraction", "resect_fraction");
    if (resectFraction < 0 || resectFraction > 1) {
      throw new DraftError(`resect_fraction must be in [0, 1], got ${resectFraction}`, "resect_fraction");
    }
    this.push({ op: "add_surgery", day, mode, resect_fraction: resectFraction });
    // defaults the server applies to a freshly added event
    this.echo.surgeries.push({
      day,
      mode,
      resect_fraction: resectFraction,
      erosion_radius: 0,
      rim_width: 0,
    });
    this.resort();
  }

  removeSurgery(index: number) {
    this.checkIndex(this.echo.surgeries.length, index, "surgeries");
    this.push({ op: "remove_surgery", index });
    this.echo.surgeries.splice(index, 1);
  }

  removeAllSurgeries() {
    this.push({ op: "remove_surgery", all: true });
    this.echo.surgeries = [];
  }

  moveSurgery(index: number, day: number) {
    this.checkIndex(this.echo.surgeries.length, index, "surgeries");
    requireFinite(day, "surgery day", "day");
    this.push({ op: "move_surgery", index, day });
    this.echo.surgeries[index] = { ...this.echo.surgeries[index], day };
    this.resort();
  }

  // -------------------------------------------------------------------- chemo

  addChemo(startDay: number, amplitude: number, decayRate: number, kind = "chemo") {
    requireFinite(startDay, "chemo start_day", "start_day");
    requireFinite(amplitude, "chemo amplitude", "amplitude");
    requireFinite(decayRate, "chemo decay_rate", "decay_rate");
    if (amplitude < 0) throw new DraftError(`chemo amplitude must be >= 0, got ${amplitude}`, "amplitude");
    if (decayRate < 0) throw new DraftError(`chemo decay_rate must be >= 0, got ${decayRate}`, "decay_rate");
    this.push({ op: "add_chemo", start_day: startDay, amplitude, decay_rate: decayRate, kind });
    this.echo.chemo.push({ start_day: startDay, amplitude, decay_rate: decayRate, kind });
    this.resort();
  }

  removeChemo(index: number) {
    this.checkIndex(this.echo.chemo.length, index, "chemo");
    this.push({ op: "remove_chemo", index });
    this.echo.chemo.splice(index, 1);
  }

  removeAllChemo() {
    this.push({ op: "remove_chemo", all: true });
    this.echo.chemo = [];
  }

  moveChemo(index: number, startDay: number) {
    this.checkIndex(this.echo.chemo.length, index, "chemo");
    requireFinite(startDay, "chemo start_day", "start_day");
    this.push({ op: "move_chemo", index, start_day: startDay });
    this.echo.chemo[index] = { ...this.echo.chemo[index], start_day: startDay };
    this.resort();
  }

  setChemoAmplitude(index: number, amplitude: number) {
    this.checkIndex(this.echo.chemo.length, index, "chemo");
    requireFinite(amplitude, "chemo amplitude", "amplitude");
    if (amplitude < 0) throw new DraftError(`chemo amplitude must be >= 0, got ${amplitude}`, "amplitude");
    this.push({ op: "set_chemo_amplitude", index, amplitude });
    this.echo.chemo[index] = { ...this.echo.chemo[index], amplitude };
    this.resort();
  }

  // ------------------------------------------------------------ serialization

  /** The exact /whatif request body. Override objects appear only when set. */
  toRequest(): ScenarioRequest {
    const req: ScenarioRequest = { patient_id: this.patientId, edits: this.edits };
    if (this.horizon !== null) req.horizon = this.horizon;
    if (this.maskDays !== null) req.mask_days = [...this.maskDays];
    if (Object.keys(this.params).length > 0) req.params = { ...this.params };
    if (Object.keys(this.config).length > 0) req.config = { ...this.config };
    return req;
  }

  // ------------------------------------------------------------------ plumbing

  private push(op: EditOp) {
    this.ops.push(op);
  }

  private checkIndex(len: number, index: number, lane: string) {
    if (!Number.isInteger(index) || index < 0 || index >= len) {
      throw new DraftError(`${lane} index ${index} out of range [0, ${len})`, "index");
    }
  }

  private resort() {
    // stable sorts, same keys the server uses after every op
    this.echo.surgeries.sort((a: SurgeryDoc, b: SurgeryDoc) => a.day - b.day);
    this.echo.rt.sort((a: RtDoc, b: RtDoc) => a.day - b.day);
    this.echo.chemo.sort((a: ChemoDoc, b: ChemoDoc) => a.start_day - b.start_day);
  }
}
