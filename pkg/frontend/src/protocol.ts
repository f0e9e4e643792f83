/** Wire protocol shared with the recognition service.
 *
 * Client -> server binary frame message: u8 type tag (0x01), u32 width,
 * u32 height (little-endian), then tightly packed RGB24. Commands travel as
 * JSON text; the server answers every frame with a JSON prediction event.
 */

export const FRAME_TAG = 0x01;
export const FRAME_HEADER_BYTES = 9;

export interface FrameReply {
  frame: number;
  label: string;
  prob: number;
  probs: number[];
  text: string;
}

export interface ServerError {
  error: string;
}

export interface Health {
  model: string;
  classes: string[];
  input: number[]; // [C, H, W]
}

export type Command =
  | { cmd: "clear" }
  | { cmd: "backspace" }
  | { cmd: "config"; k?: number; tau?: number; idle_ms?: number };

export function framePayloadBytes(width: number, height: number): number {
  return FRAME_HEADER_BYTES + width * height * 3;
}

export function encodeFrameMessage(rgb: Uint8Array, width: number, height: number): ArrayBuffer {
  if (rgb.length !== width * height * 3) {
    throw new Error(`rgb payload is ${rgb.length} bytes, expected ${width * height * 3}`);
  }
  const buf = new ArrayBuffer(framePayloadBytes(width, height));
  const view = new DataView(buf);
  view.setUint8(0, FRAME_TAG);
  view.setUint32(1, width, true);
  view.setUint32(5, height, true);
  new Uint8Array(buf, FRAME_HEADER_BYTES).set(rgb);
  return buf;
}

/** RGBA canvas pixels -> tightly packed RGB24. */
export function rgbaToRgb(rgba: Uint8ClampedArray | Uint8Array): Uint8Array {
  const pixels = rgba.length / 4;
  const rgb = new Uint8Array(pixels * 3);
  for (let i = 0, j = 0; i < rgba.length; i += 4, j += 3) {
    rgb[j] = rgba[i];
    rgb[j + 1] = rgba[i + 1];
    rgb[j + 2] = rgba[i + 2];
  }
  return rgb;
}

export function isFrameReply(msg: unknown): msg is FrameReply {
  return typeof msg === "object" && msg !== null && "label" in msg && "probs" in msg;
}
