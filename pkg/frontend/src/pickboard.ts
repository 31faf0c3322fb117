/**
 * Pick-board state machine: six registration landmarks, one active at a
 * time, at most one pick per name. The service session stays the single
 * source of truth; the board is always rebuildable from a session GET.
 */

import type { SessionState } from "./api.js";

/** COCHLEA_BASE is the held-out test landmark and never appears here. */
export const REGISTRATION_LANDMARKS = [
  "RWN",
  "INCUS_TIP",
  "UMBO",
  "MALLEUS_SHORT",
  "PYRAMID_TIP",
  "COCHLEA_APEX",
] as const;

export type LandmarkName = (typeof REGISTRATION_LANDMARKS)[number];

export interface BoardRow {
  name: LandmarkName;
  pick: [number, number] | null;
  residualPx: number | null;
  active: boolean;
}

export class PickBoard {
  private picks = new Map<LandmarkName, [number, number]>();
  private residuals = new Map<LandmarkName, number>();
  private activeName: LandmarkName = REGISTRATION_LANDMARKS[0];

  get active(): LandmarkName {
    return this.activeName;
  }

  get pickCount(): number {
    return this.picks.size;
  }

  /** Registration becomes possible once all six picks are set. */
  get canRegister(): boolean {
    return this.picks.size === REGISTRATION_LANDMARKS.length;
  }

  setActive(name: LandmarkName): void {
    this.activeName = name;
  }

  /** Record a pick for the active landmark and auto-advance to the next unset one. */
  place(u: number, v: number): LandmarkName {
    const placed = this.activeName;
    this.picks.set(placed, [u, v]);
    this.residuals.clear(); // stale after any pick change
    const next = REGISTRATION_LANDMARKS.find((n) => !this.picks.has(n));
    if (next !== undefined) this.activeName = next;
    return placed;
  }

  remove(name: LandmarkName): void {
    this.picks.delete(name);
    this.residuals.clear();
    this.activeName = name;
  }

  pickOf(name: LandmarkName): [number, number] | null {
    return this.picks.get(name) ?? null;
  }

  /** Adopt the service's verbatim register() residuals. */
  setResiduals(residuals: Record<string, number>): void {
    this.residuals.clear();
    for (const [name, px] of Object.entries(residuals)) {
      this.residuals.set(name as LandmarkName, px);
    }
  }

  /** Rebuild exactly from a session GET: reloading the page loses nothing. */
  static fromSession(state: SessionState): PickBoard {
    const board = new PickBoard();
    for (const [name, uv] of Object.entries(state.picks)) {
      board.picks.set(name as LandmarkName, [uv[0], uv[1]]);
    }
    if (state.residuals_px) board.setResiduals(state.residuals_px);
    const next = REGISTRATION_LANDMARKS.find((n) => !board.picks.has(n));
    board.activeName = next ?? REGISTRATION_LANDMARKS[0];
    return board;
  }

  /** The worst residual is highlighted so the user knows what to re-pick. */
  rows(): BoardRow[] {
    return REGISTRATION_LANDMARKS.map((name) => ({
      name,
      pick: this.pickOf(name),
      residualPx: this.residuals.get(name) ?? null,
      active: name === this.activeName,
    }));
  }

  worstResidual(): LandmarkName | null {
    let worst: LandmarkName | null = null;
    let worstPx = -Infinity;
    for (const [name, px] of this.residuals) {
      if (px > worstPx) {
        worstPx = px;
        worst = name;
      }
    }
    return worst;
  }
}
