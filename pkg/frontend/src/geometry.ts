/**
 * Display <-> native pixel conversion.
 *
 * The only geometry the UI ever does: the displayed image may be zoomed,
 * so click positions scale by the exact rational factor native/display
 * before being submitted. Everything else happens server-side.
 */

export interface DisplayMapping {
  nativeWidth: number;
  nativeHeight: number;
  displayWidth: number;
  displayHeight: number;
}

/** Click offset within the displayed element -> native frame pixels, or
 * null when the click falls outside the image (no request is sent). */
export function displayToNative(
  m: DisplayMapping,
  x: number,
  y: number,
): [number, number] | null {
  if (x < 0 || y < 0 || x >= m.displayWidth || y >= m.displayHeight) {
    return null;
  }
  const u = (x * m.nativeWidth) / m.displayWidth;
  const v = (y * m.nativeHeight) / m.displayHeight;
  if (u > m.nativeWidth - 1 || v > m.nativeHeight - 1) {
    return [Math.min(u, m.nativeWidth - 1), Math.min(v, m.nativeHeight - 1)];
  }
  return [u, v];
}

/** Native frame pixels -> display offset, for drawing pick markers. */
export function nativeToDisplay(
  m: DisplayMapping,
  u: number,
  v: number,
): [number, number] {
  return [(u * m.displayWidth) / m.nativeWidth, (v * m.displayHeight) / m.nativeHeight];
}
