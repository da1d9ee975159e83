/** Float image buffers plus PNG/PFM codecs matching the exchange formats:
 *  8-bit RGB PNG for LDR images, little-endian PFM for depth. */

import * as fs from "node:fs";
import { PNG } from "pngjs";

export interface FloatImage {
  width: number;
  height: number;
  /** row-major RGB, values in [0, 1] for LDR content */
  data: Float64Array;
}

export function makeImage(width: number, height: number): FloatImage {
  return { width, height, data: new Float64Array(width * height * 3) };
}

export function readPng(path: string): FloatImage {
  const png = PNG.sync.read(fs.readFileSync(path));
  const out = makeImage(png.width, png.height);
  for (let i = 0; i < png.width * png.height; i++) {
    out.data[i * 3] = png.data[i * 4] / 255;
    out.data[i * 3 + 1] = png.data[i * 4 + 1] / 255;
    out.data[i * 3 + 2] = png.data[i * 4 + 2] / 255;
  }
  return out;
}

export function writePng(path: string, img: FloatImage): void {
  const png = new PNG({ width: img.width, height: img.height });
  for (let i = 0; i < img.width * img.height; i++) {
    for (let c = 0; c < 3; c++) {
      png.data[i * 4 + c] = Math.round(Math.min(1, Math.max(0, img.data[i * 3 + c])) * 255);
    }
    png.data[i * 4 + 3] = 255;
  }
  fs.writeFileSync(path, PNG.sync.write(png));
}

/** Grayscale mask from an 8-bit PNG (any channel layout): true where > 127. */
export function readMaskPng(path: string): { width: number; height: number; data: Uint8Array } {
  const png = PNG.sync.read(fs.readFileSync(path));
  const data = new Uint8Array(png.width * png.height);
  for (let i = 0; i < data.length; i++) {
    data[i] = png.data[i * 4] > 127 ? 1 : 0;
  }
  return { width: png.width, height: png.height, data };
}

/** Single-channel PFM ("Pf"), negative scale meaning little-endian. */
export function readPfmGray(path: string): { width: number; height: number; data: Float32Array } {
  const blob = fs.readFileSync(path);
  const header = blob.subarray(0, 64).toString("latin1");
  const m = header.match(/^(Pf|PF)\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s/);
  if (!m) throw new Error(`${path}: malformed PFM header`);
  if (m[1] !== "Pf") throw new Error(`${path}: expected grayscale PFM`);
  const width = parseInt(m[2], 10);
  const height = parseInt(m[3], 10);
  const scale = parseFloat(m[4]);
  const littleEndian = scale < 0;
  const offset = m[0].length;
  const count = width * height;
  if (blob.length < offset + count * 4) throw new Error(`${path}: truncated PFM payload`);
  const view = new DataView(blob.buffer, blob.byteOffset + offset, count * 4);
  const data = new Float32Array(count);
  // rows are stored bottom-to-top
  for (let row = 0; row < height; row++) {
    for (let col = 0; col < width; col++) {
      data[(height - 1 - row) * width + col] = view.getFloat32((row * width + col) * 4, littleEndian);
    }
  }
  return { width, height, data };
}

export function boxBlur(img: FloatImage, radius: number): FloatImage {
  const { width, height } = img;
  const out = makeImage(width, height);
  const tmp = new Float64Array(img.data.length);
  // horizontal then vertical pass, clamped at the borders
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      for (let c = 0; c < 3; c++) {
        let acc = 0;
        let n = 0;
        for (let k = -radius; k <= radius; k++) {
          const xx = Math.min(width - 1, Math.max(0, x + k));
          acc += img.data[(y * width + xx) * 3 + c];
          n++;
        }
        tmp[(y * width + x) * 3 + c] = acc / n;
      }
    }
  }
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      for (let c = 0; c < 3; c++) {
        let acc = 0;
        let n = 0;
        for (let k = -radius; k <= radius; k++) {
          const yy = Math.min(height - 1, Math.max(0, y + k));
          acc += tmp[(yy * width + x) * 3 + c];
          n++;
        }
        out.data[(y * width + x) * 3 + c] = acc / n;
      }
    }
  }
  return out;
}
