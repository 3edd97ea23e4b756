// Volume-vs-day line chart. Layout is a pure function of the series and the
// pixel box, so two renders of the same response produce identical point
// lists; drawing is a thin canvas pass over that layout.

export interface Series {
  label: string;
  days: number[];
  values: number[];
  color: string;
  dashed?: boolean;
}

export interface EventMark {
  day: number;
  label: string;
  color: string;
}

export interface Tick {
  value: number;
  px: number;
}

export interface ChartLayout {
  width: number;
  height: number;
  margin: { top: number; right: number; bottom: number; left: number };
  xDomain: [number, number];
  yDomain: [number, number];
  points: Array<Array<[number, number]>>; // per series, [xPx, yPx]
  ticksX: Tick[];
  ticksY: Tick[];
}

const MARGIN = { top: 12, right: 16, bottom: 28, left: 56 };

export function layoutChart(series: Series[], width: number, height: number): ChartLayout {
  let dayLo = Infinity;
  let dayHi = -Infinity;
  let volHi = 0;
  for (const s of series) {
    if (s.days.length !== s.values.length) {
      throw new Error(`series ${s.label}: ${s.days.length} days vs ${s.values.length} values`);
    }
    for (const d of s.days) {
      if (d < dayLo) dayLo = d;
      if (d > dayHi) dayHi = d;
    }
    for (const v of s.values) if (v > volHi) volHi = v;
  }
  if (!Number.isFinite(dayLo)) {
    dayLo = 0;
    dayHi = 1;
  }
  if (dayHi <= dayLo) dayHi = dayLo + 1;
  if (volHi <= 0) volHi = 1;

  const innerW = width - MARGIN.left - MARGIN.right;
  const innerH = height - MARGIN.top - MARGIN.bottom;
  const x = (day: number) => MARGIN.left + ((day - dayLo) / (dayHi - dayLo)) * innerW;
  const y = (vol: number) => MARGIN.top + (1 - vol / volHi) * innerH;

  const points = series.map((s) => s.days.map((d, i): [number, number] => [x(d), y(s.values[i])]));
  const ticksX = niceTicks(dayLo, dayHi, 6).map((v) => ({ value: v, px: x(v) }));
  const ticksY = niceTicks(0, volHi, 5).map((v) => ({ value: v, px: y(v) }));
  return {
    width,
    height,
    margin: MARGIN,
    xDomain: [dayLo, dayHi],
    yDomain: [0, volHi],
    points,
    ticksX,
    ticksY,
  };
}

export function niceTicks(lo: number, hi: number, target: number): number[] {
  const span = hi - lo;
  if (span <= 0) return [lo];
  const raw = span / target;
  const mag = Math.pow(10, Math.floor(Math.log10(raw)));
  let step = mag;
  for (const m of [1, 2, 5, 10]) {
    if (mag * m >= raw) {
      step = mag * m;
      break;
    }
  }
  const ticks: number[] = [];
  for (let v = Math.ceil(lo / step) * step; v <= hi + 1e-9 * span; v += step) {
    ticks.push(Math.abs(v) < 1e-12 ? 0 : v);
  }
  return ticks;
}

export function drawChart(
  ctx: CanvasRenderingContext2D,
  layout: ChartLayout,
  series: Series[],
  marks: EventMark[] = [],
) {
  const { width, height, margin } = layout;
  ctx.clearRect(0, 0, width, height);
  ctx.font = "11px sans-serif";

  ctx.strokeStyle = "#ddd";
  ctx.fillStyle = "#666";
  ctx.lineWidth = 1;
  for (const t of layout.ticksY) {
    ctx.beginPath();
    ctx.moveTo(margin.left, t.px);
    ctx.lineTo(width - margin.right, t.px);
    ctx.stroke();
    ctx.textAlign = "right";
    ctx.fillText(formatTick(t.value), margin.left - 6, t.px + 3);
  }
  for (const t of layout.ticksX) {
    ctx.textAlign = "center";
    ctx.fillText(formatTick(t.value), t.px, height - margin.bottom + 16);
  }

  for (const m of marks) {
    const px = dayToPx(layout, m.day);
    ctx.strokeStyle = m.color;
    ctx.setLineDash([2, 3]);
    ctx.beginPath();
    ctx.moveTo(px, margin.top);
    ctx.lineTo(px, height - margin.bottom);
    ctx.stroke();
    ctx.setLineDash([]);
    ctx.fillStyle = m.color;
    ctx.textAlign = "center";
    ctx.fillText(m.label, px, margin.top - 2);
  }

  series.forEach((s, si) => {
    const pts = layout.points[si];
    if (pts.length === 0) return;
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 1.5;
    ctx.setLineDash(s.dashed ? [5, 4] : []);
    ctx.beginPath();
    ctx.moveTo(pts[0][0], pts[0][1]);
    for (let i = 1; i < pts.length; i++) ctx.lineTo(pts[i][0], pts[i][1]);
    ctx.stroke();
    ctx.setLineDash([]);
  });
}

export function dayToPx(layout: ChartLayout, day: number): number {
  const [lo, hi] = layout.xDomain;
  const innerW = layout.width - layout.margin.left - layout.margin.right;
  return layout.margin.left + ((day - lo) / (hi - lo)) * innerW;
}

function formatTick(v: number): string {
  if (Math.abs(v) >= 1000) return v.toFixed(0);
  if (Number.isInteger(v)) return String(v);
  return v.toPrecision(3);
}
