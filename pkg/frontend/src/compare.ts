// Side-by-side scenario diffs. Every number here is read (or linearly
// interpolated) straight from response fields; nothing is re-simulated.

import { ScenarioResponse, VolumeCurve } from "./types.js";

export interface ScenarioDiff {
  day: number; // common horizon the volumes are compared at
  volumeA: number;
  volumeB: number;
  deltaVolume: number; // B - A
  ttpA: number | null;
  ttpB: number | null;
  deltaTtp: number | null; // B - A, null if either never progresses
  dscA: number | null;
  dscB: number | null;
}

/** Curve value at `day`, linearly interpolated between samples. */
export function volumeAt(curve: VolumeCurve, day: number): number {
  const { days, volumes_mm2: vols } = curve;
  if (days.length === 0) throw new Error("empty curve");
  if (day <= days[0]) return vols[0];
  if (day >= days[days.length - 1]) return vols[vols.length - 1];
  let i = 1;
  while (days[i] < day) i++;
  const t = (day - days[i - 1]) / (days[i] - days[i - 1]);
  return vols[i - 1] + t * (vols[i] - vols[i - 1]);
}

export function compareScenarios(a: ScenarioResponse, b: ScenarioResponse): ScenarioDiff {
  const day = Math.min(a.horizon, b.horizon);
  const volumeA = volumeAt(a.curve, day);
  const volumeB = volumeAt(b.curve, day);
  const deltaTtp = a.ttp_days !== null && b.ttp_days !== null ? b.ttp_days - a.ttp_days : null;
  return {
    day,
    volumeA,
    volumeB,
    deltaVolume: volumeB - volumeA,
    ttpA: a.ttp_days,
    ttpB: b.ttp_days,
    deltaTtp,
    dscA: a.dsc_vs_last_obs,
    dscB: b.dsc_vs_last_obs,
  };
}

export function formatDiff(d: ScenarioDiff): string {
  const sign = d.deltaVolume >= 0 ? "+" : "";
  const parts = [`\u0394volume @ day ${d.day}: ${sign}${d.deltaVolume.toFixed(1)} mm\u00b2`];
  if (d.deltaTtp !== null) {
    const s = d.deltaTtp >= 0 ? "+" : "";
    parts.push(`\u0394TTP: ${s}${d.deltaTtp.toFixed(1)} d`);
  } else {
    parts.push(`TTP: ${fmtTtp(d.ttpA)} vs ${fmtTtp(d.ttpB)}`);
  }
  return parts.join("   ");
}

function fmtTtp(v: number | null): string {
  return v === null ? "none" : `${v.toFixed(1)} d`;
}
