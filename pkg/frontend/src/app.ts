/**
 * DOM wiring: session form, pick canvas, residual table, playback strip.
 * All state lives in the service session plus the small models in
 * pickboard.ts / playback.ts; reloading the page and re-fetching the
 * session reproduces the identical board.
 */

import { ApiClient, ServiceError } from "./api.js";
import { displayToNative, nativeToDisplay, DisplayMapping } from "./geometry.js";
import { PickBoard, LandmarkName } from "./pickboard.js";
import { Playback, PlaybackView } from "./playback.js";

const api = new ApiClient("");

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

let sid = "";
let board = new PickBoard();
let mapping: DisplayMapping | null = null;
let playback: Playback | null = null;
let lastObjectUrl = "";

function banner(message: string) {
  const box = el<HTMLDivElement>("banner");
  box.textContent = message;
  box.style.display = message ? "block" : "none";
}

function renderBoard() {
  const tbody = el<HTMLTableSectionElement>("board-body");
  tbody.innerHTML = "";
  const worst = board.worstResidual();
  for (const row of board.rows()) {
    const tr = document.createElement("tr");
    if (row.active) tr.classList.add("active");
    if (worst !== null && row.name === worst) tr.classList.add("worst");
    const res = row.residualPx === null ? "-" : row.residualPx.toExponential(3);
    const pick = row.pick
      ? `${row.pick[0].toFixed(1)}, ${row.pick[1].toFixed(1)}`
      : "unset";
    tr.innerHTML = `<td>${row.name}</td><td>${pick}</td><td>${res}</td>`;
    tr.addEventListener("click", () => {
      board.setActive(row.name);
      renderBoard();
    });
    tbody.appendChild(tr);
  }
  el<HTMLButtonElement>("register").disabled = !board.canRegister;
  drawMarkers();
}

function drawMarkers() {
  const layer = el<HTMLDivElement>("markers");
  layer.innerHTML = "";
  if (!mapping) return;
  for (const row of board.rows()) {
    if (!row.pick) continue;
    const [x, y] = nativeToDisplay(mapping, row.pick[0], row.pick[1]);
    const dot = document.createElement("div");
    dot.className = "marker";
    dot.style.left = `${x - 4}px`;
    dot.style.top = `${y - 4}px`;
    dot.title = row.name;
    layer.appendChild(dot);
  }
}

async function refreshFromSession() {
  const state = await api.getSession(sid);
  board = PickBoard.fromSession(state);
  renderBoard();
}

async function onPickClick(ev: MouseEvent) {
  if (!sid || !mapping) return;
  const img = el<HTMLImageElement>("frame");
  const rect = img.getBoundingClientRect();
  const native = displayToNative(mapping, ev.clientX - rect.left, ev.clientY - rect.top);
  if (native === null) return; // outside the image: no request
  const name: LandmarkName = board.active;
  try {
    await api.putPick(sid, name, native[0], native[1]);
    banner("");
    await refreshFromSession();
  } catch (e) {
    banner(e instanceof ServiceError ? `${e.code}: ${e.message}` : String(e));
  }
}

async function onRegister() {
  try {
    const result = await api.register(sid);
    board.setResiduals(result.residuals_px);
    banner(`registered, rms ${result.rms_px.toExponential(3)} px`);
    renderBoard();
    el<HTMLDivElement>("playback").style.display = "block";
    await playback?.seek(0);
  } catch (e) {
    // picks are preserved; show guidance and let the user re-pick
    banner(e instanceof ServiceError ? `${e.code}: ${e.message}` : String(e));
  }
}

function showOverlay(view: PlaybackView) {
  const img = el<HTMLImageElement>("overlay");
  if (view.bytes) {
    if (lastObjectUrl) URL.revokeObjectURL(lastObjectUrl);
    lastObjectUrl = URL.createObjectURL(new Blob([view.bytes], { type: "image/png" }));
    img.src = lastObjectUrl;
  }
  el<HTMLSpanElement>("status").textContent =
    `${view.status} (${view.inliers} inliers)` + (view.retrying ? " - retrying" : "");
  el<HTMLSpanElement>("status").className =
    view.status === "Tracking" ? "ok" : "lost";
  const slider = el<HTMLInputElement>("slider");
  slider.value = String(view.frame);
}

async function onOpen() {
  const caseId = el<HTMLInputElement>("case-id").value.trim();
  const frames = el<HTMLInputElement>("frames-name").value.trim();
  try {
    const info = await api.createSession(caseId, frames);
    sid = info.id;
    const img = el<HTMLImageElement>("frame");
    img.src = api.rawFrameUrl(sid, 0);
    img.onload = () => {
      mapping = {
        nativeWidth: info.frame_size[0],
        nativeHeight: info.frame_size[1],
        displayWidth: img.clientWidth,
        displayHeight: img.clientHeight,
      };
      renderBoard();
    };
    const slider = el<HTMLInputElement>("slider");
    slider.max = String(info.frame_count - 1);
    playback = new Playback(api, sid, info.frame_count, showOverlay);
    banner("");
    await refreshFromSession();
  } catch (e) {
    banner(e instanceof ServiceError ? `${e.code}: ${e.message}` : String(e));
  }
}

export function wire() {
  el<HTMLButtonElement>("open").addEventListener("click", onOpen);
  el<HTMLImageElement>("frame").addEventListener("click", onPickClick);
  el<HTMLButtonElement>("register").addEventListener("click", onRegister);
  el<HTMLInputElement>("slider").addEventListener("input", (ev) => {
    void playback?.seek(Number((ev.target as HTMLInputElement).value));
  });
  el<HTMLButtonElement>("play").addEventListener("click", async () => {
    if (!playback) return;
    playback.play();
    while (playback.state.playing) {
      await playback.tick();
      await new Promise((r) => setTimeout(r, 100));
    }
  });
  el<HTMLButtonElement>("pause").addEventListener("click", () => playback?.pause());
}

if (typeof document !== "undefined" && document.getElementById("open")) {
  wire();
}
