// Wire types for the what-if service. These mirror the JSON schemas exactly;
// the console never reshapes server data, it only displays it.

export type KillMode = "Additive" | "Saturation" | "Synergy";
export type SurgeryMode = "Mul" | "MorphOp" | "Rim";

export const KILL_MODES: KillMode[] = ["Additive", "Saturation", "Synergy"];
export const SURGERY_MODES: SurgeryMode[] = ["Mul", "MorphOp", "Rim"];

export interface SurgeryDoc {
  day: number;
  mode: SurgeryMode;
  resect_fraction: number;
  erosion_radius: number;
  rim_width: number;
}

export interface RtDoc {
  day: number;
  dose: number;
}

export interface ChemoDoc {
  start_day: number;
  amplitude: number;
  decay_rate: number;
  kind: string;
}

export interface TimelineDoc {
  surgeries: SurgeryDoc[];
  rt: RtDoc[];
  chemo: ChemoDoc[];
}

export type EditOpName =
  | "add_rt"
  | "remove_rt"
  | "move_rt"
  | "set_rt_dose"
  | "add_surgery"
  | "remove_surgery"
  | "move_surgery"
  | "add_chemo"
  | "remove_chemo"
  | "move_chemo"
  | "set_chemo_amplitude";

export interface EditOp {
  op: EditOpName;
  index?: number;
  all?: boolean;
  day?: number;
  dose?: number;
  mode?: string;
  resect_fraction?: number;
  start_day?: number;
  amplitude?: number;
  decay_rate?: number;
  kind?: string;
}

export interface ParamOverrides {
  D?: number;
  k?: number;
  theta?: number;
  alpha_ct?: number;
  alpha_rt?: number;
  beta_rt?: number;
}

export interface ConfigOverrides {
  steps_per_day?: number;
  alpha?: number;
  tau?: number;
  obs_density?: number;
  kill_mode?: KillMode;
  surgery_mode?: SurgeryMode;
}

export interface ScenarioRequest {
  patient_id: string;
  horizon?: number;
  mask_days?: number[];
  params?: ParamOverrides;
  config?: ConfigOverrides;
  edits?: EditOp[];
}

export interface VolumeCurve {
  days: number[];
  volumes_mm2: number[];
}

export interface MaskSnapshot {
  day: number;
  pgm_base64: string;
}

export interface ScenarioResponse {
  patient_id: string;
  curve: VolumeCurve;
  masks: MaskSnapshot[];
  dsc_vs_last_obs: number | null;
  ttp_days: number | null;
  timeline: TimelineDoc;
  params: Record<string, number>;
  config: Record<string, unknown>;
  horizon: number;
}

export interface JobAccepted {
  status: "accepted";
  job: string;
  poll: string;
  estimated_seconds: number;
}

export interface ApiErrorBody {
  code: string;
  message: string;
  field: string | null;
}

export interface CovariatesDoc {
  age_years: number;
  grade: number;
  markers: Record<string, number>;
}

export interface PatientSummary {
  id: string;
  scan_days: number[];
  covariates: CovariatesDoc | null;
}

export interface ObservationDoc {
  day: number;
  volume_mm2: number;
  mask_pgm_base64: string;
  image_pgm_base64: string | null;
  image_range: [number, number] | null;
}

export interface PatientDetail {
  id: string;
  spacing: number;
  grid: [number, number];
  domain_pgm_base64: string;
  covariates: CovariatesDoc | null;
  timeline: TimelineDoc;
  observations: ObservationDoc[];
  baseline_curve: VolumeCurve;
}

export interface HealthzDoc {
  status: string;
  version: string;
  cohort_hash: string;
  n_patients: number;
}
