/**
 * Playback controller: walks overlay frames through the API client and
 * exposes exactly what the service sent (bytes, tracking status, inlier
 * count). Network failures surface as a retry indicator without touching
 * the last good frame.
 */

import type { ApiClient, OverlayFrame } from "./api.js";

export interface PlaybackView {
  frame: number;
  frameCount: number;
  playing: boolean;
  status: string; // "Tracking" | "Lost" | "unknown"
  inliers: number;
  retrying: boolean;
  bytes: ArrayBuffer | null;
}

export class Playback {
  private view: PlaybackView;

  constructor(
    private readonly api: ApiClient,
    private readonly sid: string,
    frameCount: number,
    private readonly onChange: (v: PlaybackView) => void = () => {},
  ) {
    this.view = {
      frame: 0,
      frameCount,
      playing: false,
      status: "unknown",
      inliers: 0,
      retrying: false,
      bytes: null,
    };
  }

  get state(): PlaybackView {
    return { ...this.view };
  }

  /** Fetch one frame; the served bytes are adopted verbatim. */
  async seek(n: number): Promise<PlaybackView> {
    const clamped = Math.max(0, Math.min(this.view.frameCount - 1, n));
    try {
      const frame: OverlayFrame = await this.api.fetchOverlay(this.sid, clamped);
      this.view = {
        ...this.view,
        frame: clamped,
        status: frame.status,
        inliers: frame.inliers,
        retrying: false,
        bytes: frame.bytes,
      };
    } catch {
      // keep the last good frame; surface the retry indicator
      this.view = { ...this.view, retrying: true };
    }
    this.onChange(this.state);
    return this.state;
  }

  /** One play-loop step: advance (or retry the current frame after an error). */
  async tick(): Promise<PlaybackView> {
    if (!this.view.playing) return this.state;
    const next = this.view.retrying
      ? this.view.frame
      : Math.min(this.view.frame + 1, this.view.frameCount - 1);
    const state = await this.seek(next);
    if (state.frame >= this.view.frameCount - 1 && !state.retrying) {
      this.view = { ...this.view, playing: false };
      this.onChange(this.state);
    }
    return this.state;
  }

  play(): void {
    this.view = { ...this.view, playing: true };
    this.onChange(this.state);
  }

  pause(): void {
    this.view = { ...this.view, playing: false };
    this.onChange(this.state);
  }
}
