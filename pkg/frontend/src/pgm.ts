// Binary PGM (P5) decoding for masks and quantized images delivered by the
// service as base64. The console never re-thresholds or rescales pixels: the
// raster handed to the canvas is exactly the payload the server sent.

export interface Raster {
  width: number;
  height: number;
  data: Uint8Array; // row-major, one byte per pixel
}

function base64ToBytes(b64: string): Uint8Array {
  // atob exists in browsers and in node >= 16
  const bin = atob(b64);
  const out = new Uint8Array(bin.length);
  for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
  return out;
}

export function decodePgm(b64: string): Raster {
  const bytes = base64ToBytes(b64);
  // header: "P5\n<width> <height>\n<maxval>\n", then raw pixels
  let pos = 0;
  const token = (): string => {
    while (pos < bytes.length && isSpace(bytes[pos])) pos++;
    const start = pos;
    while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
    return String.fromCharCode(...bytes.subarray(start, pos));
  };
  const magic = token();
  if (magic !== "P5") throw new Error(`not a binary PGM: magic ${JSON.stringify(magic)}`);
  const width = parseInt(token(), 10);
  const height = parseInt(token(), 10);
  const maxval = parseInt(token(), 10);
  if (!(width > 0 && height > 0)) throw new Error(`bad PGM dimensions ${width}x${height}`);
  if (maxval !== 255) throw new Error(`unsupported PGM maxval ${maxval}`);
  pos++; // single whitespace byte after maxval
  const data = bytes.subarray(pos, pos + width * height);
  if (data.length !== width * height) {
    throw new Error(`PGM payload truncated: ${data.length} of ${width * height} bytes`);
  }
  return { width, height, data };
}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x0a || b === 0x0d || b === 0x09;
}

/** Paint a raster into RGBA pixels. Masks tint nonzero pixels with `rgba`;
 * grayscale images pass `null` to map value -> gray directly. */
export function rasterToRgba(r: Raster, rgba: [number, number, number, number] | null): Uint8ClampedArray {
  const out = new Uint8ClampedArray(r.width * r.height * 4);
  for (let i = 0; i < r.data.length; i++) {
    const v = r.data[i];
    const j = i * 4;
    if (rgba === null) {
      out[j] = v;
      out[j + 1] = v;
      out[j + 2] = v;
      out[j + 3] = 255;
    } else if (v !== 0) {
      out[j] = rgba[0];
      out[j + 1] = rgba[1];
      out[j + 2] = rgba[2];
      out[j + 3] = rgba[3];
    }
  }
  return out;
}
