// Interactive treatment-timeline editor: three lanes (surgery / RT / chemo)
// on a shared day axis. Chips are dragged along the axis; every mutation is
// routed through the ScenarioDraft so the recorded op list stays the single
// source of truth for what gets sent to the service.

import { DraftError, ScenarioDraft } from "./edits.js";
import { TimelineDoc } from "./types.js";

const LANES = ["surgery", "rt", "chemo"] as const;
type Lane = (typeof LANES)[number];

const LANE_LABEL: Record<Lane, string> = { surgery: "Surgery", rt: "RT", chemo: "Chemo" };
const LANE_COLOR: Record<Lane, string> = { surgery: "#b5541c", rt: "#2166ac", chemo: "#1a7a3c" };

export interface EditorOptions {
  dayMax: number;
  onChange: () => void;
  onError: (err: DraftError) => void;
}

export class TimelineEditor {
  private root: HTMLElement;
  private draft: ScenarioDraft;
  private opts: EditorOptions;

  constructor(root: HTMLElement, draft: ScenarioDraft, opts: EditorOptions) {
    this.root = root;
    this.draft = draft;
    this.opts = opts;
    this.render();
  }

  setDraft(draft: ScenarioDraft) {
    this.draft = draft;
    this.render();
  }

  render() {
    this.root.innerHTML = "";
    const tl = this.draft.timeline;
    for (const lane of LANES) {
      this.root.appendChild(this.buildLane(lane, tl));
    }
    this.root.appendChild(this.buildAxis());
  }

  private dayToFrac(day: number): number {
    return Math.max(0, Math.min(1, day / this.opts.dayMax));
  }

  private fracToDay(frac: number): number {
    const day = Math.max(0, Math.min(1, frac)) * this.opts.dayMax;
    return Math.round(day * 2) / 2; // snap to half days
  }

  private buildLane(lane: Lane, tl: TimelineDoc): HTMLElement {
    const row = document.createElement("div");
    row.className = "tl-lane";

    const label = document.createElement("span");
    label.className = "tl-label";
    label.textContent = LANE_LABEL[lane];
    row.appendChild(label);

    const track = document.createElement("div");
    track.className = "tl-track";
    track.dataset.lane = lane;
    row.appendChild(track);

    const events =
      lane === "surgery"
        ? tl.surgeries.map((s) => ({ day: s.day, text: `${s.mode} ${Math.round(s.resect_fraction * 100)}%` }))
        : lane === "rt"
          ? tl.rt.map((f) => ({ day: f.day, text: `${f.dose} Gy` }))
          : tl.chemo.map((c) => ({ day: c.start_day, text: `${c.kind} a=${c.amplitude}` }));

    events.forEach((ev, index) => {
      track.appendChild(this.buildChip(lane, index, ev.day, ev.text));
    });

    track.addEventListener("dblclick", (e: MouseEvent) => {
      if ((e.target as HTMLElement).closest(".tl-chip")) return;
      const rect = track.getBoundingClientRect();
      const day = this.fracToDay((e.clientX - rect.left) / rect.width);
      this.commit(() => {
        if (lane === "rt") this.draft.addRt(day, 2.0);
        else if (lane === "surgery") this.draft.addSurgery(day);
        else this.draft.addChemo(day, 1.0, 0.1);
      });
    });

    return row;
  }

  private buildChip(lane: Lane, index: number, day: number, text: string): HTMLElement {
    const chip = document.createElement("div");
    chip.className = "tl-chip";
    chip.style.left = `${this.dayToFrac(day) * 100}%`;
    chip.style.background = LANE_COLOR[lane];
    chip.title = `day ${day} (drag to move, right-click to remove)`;
    chip.textContent = text;

    chip.addEventListener("contextmenu", (e: MouseEvent) => {
      e.preventDefault();
      this.commit(() => {
        if (lane === "rt") this.draft.removeRt(index);
        else if (lane === "surgery") this.draft.removeSurgery(index);
        else this.draft.removeChemo(index);
      });
    });

    chip.addEventListener("pointerdown", (e: PointerEvent) => {
      e.preventDefault();
      chip.setPointerCapture(e.pointerId);
      const track = chip.parentElement as HTMLElement;
      const rect = track.getBoundingClientRect();
      let lastDay = day;

      const onMove = (ev: PointerEvent) => {
        lastDay = this.fracToDay((ev.clientX - rect.left) / rect.width);
        chip.style.left = `${this.dayToFrac(lastDay) * 100}%`;
      };
      const onUp = () => {
        chip.removeEventListener("pointermove", onMove);
        chip.removeEventListener("pointerup", onUp);
        if (lastDay === day) return;
        this.commit(() => {
          if (lane === "rt") this.draft.moveRt(index, lastDay);
          else if (lane === "surgery") this.draft.moveSurgery(index, lastDay);
          else this.draft.moveChemo(index, lastDay);
        });
      };
      chip.addEventListener("pointermove", onMove);
      chip.addEventListener("pointerup", onUp);
    });

    return chip;
  }

  private buildAxis(): HTMLElement {
    const axis = document.createElement("div");
    axis.className = "tl-axis";
    const n = 6;
    for (let i = 0; i <= n; i++) {
      const t = document.createElement("span");
      t.className = "tl-tick";
      t.style.left = `${(i / n) * 100}%`;
      t.textContent = `${Math.round((i / n) * this.opts.dayMax)}d`;
      axis.appendChild(t);
    }
    return axis;
  }

  private commit(mutate: () => void) {
    try {
      mutate();
    } catch (err) {
      if (err instanceof DraftError) {
        this.opts.onError(err);
        return;
      }
      throw err;
    }
    this.render();
    this.opts.onChange();
  }
}
