/**
 * Typed client for the registration/overlay service.
 *
 * All geometry is computed server-side; this module only moves JSON and
 * image bytes. The fetch implementation is injectable so the client is
 * testable without a browser or a live server.
 */

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface SessionInfo {
  id: string;
  frame_count: number;
  frame_size: [number, number];
  revision: number;
}

export interface SessionState {
  id: string;
  case: string;
  frame_count: number;
  frame_size: [number, number];
  pickable: string[];
  picks: Record<string, [number, number]>;
  registered: boolean;
  camera: number[] | null;
  residuals_px: Record<string, number> | null;
  track_status: string | null;
  revision: number;
}

export interface RegisterResult {
  camera: number[];
  residuals_px: Record<string, number>;
  rms_px: number;
  revision: number;
}

export interface OverlayFrame {
  bytes: ArrayBuffer;
  status: string;
  inliers: number;
  revision: number;
}

export class ServiceError extends Error {
  constructor(
    public readonly code: string,
    message: string,
    public readonly httpStatus: number,
  ) {
    super(message);
  }
}

async function parseError(resp: Response): Promise<ServiceError> {
  try {
    const body = await resp.json();
    return new ServiceError(body.error.code, body.error.message, resp.status);
  } catch {
    return new ServiceError("unknown", `HTTP ${resp.status}`, resp.status);
  }
}

export class ApiClient {
  constructor(
    private readonly base: string = "",
    private readonly fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async json<T>(url: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchImpl(this.base + url, init);
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as T;
  }

  createSession(caseId: string, frames: string): Promise<SessionInfo> {
    return this.json<SessionInfo>("/sessions", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ case: caseId, frames }),
    });
  }

  getSession(sid: string): Promise<SessionState> {
    return this.json<SessionState>(`/sessions/${sid}`);
  }

  putPick(sid: string, name: string, u: number, v: number) {
    return this.json<{ count: number; revision: number }>(
      `/sessions/${sid}/picks/${name}`,
      {
        method: "PUT",
        headers: { "content-type": "application/json" },
        body: JSON.stringify({ u, v }),
      },
    );
  }

  deletePick(sid: string, name: string) {
    return this.json<{ count: number; revision: number }>(
      `/sessions/${sid}/picks/${name}`,
      { method: "DELETE" },
    );
  }

  register(sid: string): Promise<RegisterResult> {
    return this.json<RegisterResult>(`/sessions/${sid}/register`, {
      method: "POST",
    });
  }

  rawFrameUrl(sid: string, n: number): string {
    return `${this.base}/sessions/${sid}/frames/${n}/raw?format=png`;
  }

  overlayFrameUrl(sid: string, n: number): string {
    return `${this.base}/sessions/${sid}/frames/${n}/overlay?format=png`;
  }

  /** Overlay bytes plus the tracking headers; bytes are served verbatim. */
  async fetchOverlay(sid: string, n: number): Promise<OverlayFrame> {
    const resp = await this.fetchImpl(this.overlayFrameUrl(sid, n));
    if (!resp.ok) throw await parseError(resp);
    return {
      bytes: await resp.arrayBuffer(),
      status: resp.headers.get("X-Track-Status") ?? "unknown",
      inliers: Number(resp.headers.get("X-Inlier-Count") ?? "0"),
      revision: Number(resp.headers.get("X-Revision") ?? "0"),
    };
  }
}
