/** Request/response exchange over a shared directory.
 *
 *  Requests arrive as <exchange>/req/<id>/{request.json, composited.png,
 *  mask.png, depth.pfm, background.png}; request.json is written last by the
 *  producer and acts as the ready marker. The response is
 *  <exchange>/resp/<id>/pseudo_gt.png followed by <exchange>/resp/<id>.done
 *  (written last: consumers treat the marker as proof the image is complete).
 *  Failures produce <exchange>/resp/<id>.err with a message instead.
 */

import * as fs from "node:fs";
import * as path from "node:path";
import { ExposureEmbedding } from "./embedding.js";
import { Conditioning, LatentModel, ddimSample } from "./denoiser.js";
import { FloatImage, readMaskPng, readPfmGray, readPng, writePng } from "./image.js";

export interface RequestDoc {
  id: string;
  t: number;
  ev: number;
  tau: number;
  k: number;
  cfg_scale: number;
  camera: { fx: number; fy: number; cx: number; cy: number; w: number; h: number };
  balls: { x: number; y: number; z: number; r: number }[];
}

export interface ResponderOptions {
  exchangeDir: string;
  evMin: number;
  embeddingsPath?: string;
  pollMs: number;
  maxRequests: number; // 0 = run forever
}

function seedFromId(id: string): number {
  let h = 2166136261;
  for (const ch of id) {
    h ^= ch.charCodeAt(0);
    h = Math.imul(h, 16777619) >>> 0;
  }
  return h >>> 0;
}

function downsampleToLatent(values: Float64Array, w: number, h: number,
                            lw: number, lh: number): Float64Array {
  const out = new Float64Array(lw * lh);
  const counts = new Float64Array(lw * lh);
  const stride = Math.ceil(w / lw);
  for (let y = 0; y < h; y++) {
    const ly = Math.min(lh - 1, Math.floor(y / stride));
    for (let x = 0; x < w; x++) {
      const lx = Math.min(lw - 1, Math.floor(x / stride));
      out[ly * lw + lx] += values[y * w + x];
      counts[ly * lw + lx]++;
    }
  }
  for (let i = 0; i < out.length; i++) out[i] /= Math.max(counts[i], 1);
  return out;
}

export class Responder {
  private readonly model: LatentModel;
  private readonly opts: ResponderOptions;
  private served = 0;

  constructor(model: LatentModel, opts: ResponderOptions) {
    this.model = model;
    this.opts = opts;
    fs.mkdirSync(path.join(opts.exchangeDir, "req"), { recursive: true });
    fs.mkdirSync(path.join(opts.exchangeDir, "resp"), { recursive: true });
  }

  pendingRequests(): string[] {
    const reqRoot = path.join(this.opts.exchangeDir, "req");
    const respRoot = path.join(this.opts.exchangeDir, "resp");
    const out: string[] = [];
    for (const id of fs.readdirSync(reqRoot).sort()) {
      const ready = fs.existsSync(path.join(reqRoot, id, "request.json"));
      const done = fs.existsSync(path.join(respRoot, `${id}.done`));
      const errored = fs.existsSync(path.join(respRoot, `${id}.err`));
      if (ready && !done && !errored) out.push(id);
    }
    return out;
  }

  /** Answer one request bundle; writes the image first, the marker last. */
  handle(id: string): void {
    const reqDir = path.join(this.opts.exchangeDir, "req", id);
    const respRoot = path.join(this.opts.exchangeDir, "resp");
    try {
      const doc: RequestDoc = JSON.parse(
        fs.readFileSync(path.join(reqDir, "request.json"), "utf-8"),
      );
      const composite = readPng(path.join(reqDir, "composited.png"));
      const mask = readMaskPng(path.join(reqDir, "mask.png"));
      const depth = readPfmGray(path.join(reqDir, "depth.pfm"));
      if (mask.width !== composite.width || depth.width !== composite.width) {
        throw new Error("request images have inconsistent dimensions");
      }

      const embedding = new ExposureEmbedding(this.opts.evMin, this.opts.embeddingsPath);
      const zeta = embedding.at(Math.max(this.opts.evMin, Math.min(0, doc.ev)));
      const fraction = embedding.fractionOf(zeta);

      const zContext = this.model.encode(composite);
      const maskF = Float64Array.from(mask.data);
      let dmin = Infinity;
      let dmax = -Infinity;
      for (const v of depth.data) {
        if (v < dmin) dmin = v;
        if (v > dmax) dmax = v;
      }
      const span = Math.max(dmax - dmin, 1e-9);
      const depthNorm = new Float64Array(depth.data.length);
      for (let i = 0; i < depthNorm.length; i++) {
        depthNorm[i] = (depth.data[i] - dmin) / span;
      }
      const cond: Conditioning = {
        exposureFraction: fraction,
        evMin: this.opts.evMin,
        depth: downsampleToLatent(depthNorm, depth.width, depth.height,
                                  zContext.width, zContext.height),
        mask: downsampleToLatent(maskF, mask.width, mask.height,
                                 zContext.width, zContext.height),
        context: zContext,
      };

      const result = ddimSample(this.model, composite, cond, {
        tau: doc.tau,
        steps: doc.k,
        cfgScale: doc.cfg_scale,
        seed: seedFromId(doc.id),
      });
      // inpainting contract: pixels outside the mask are the background
      const background = readPng(path.join(reqDir, "background.png"));
      const final: FloatImage = {
        width: result.width,
        height: result.height,
        data: result.data,
      };
      for (let i = 0; i < mask.data.length; i++) {
        if (!mask.data[i]) {
          for (let c = 0; c < 3; c++) final.data[i * 3 + c] = background.data[i * 3 + c];
        }
      }

      const respDir = path.join(respRoot, id);
      fs.mkdirSync(respDir, { recursive: true });
      writePng(path.join(respDir, "pseudo_gt.png"), final);
      fs.writeFileSync(path.join(respRoot, `${id}.done`), "");
    } catch (err) {
      fs.writeFileSync(path.join(respRoot, `${id}.err`), String(err));
    }
    this.served++;
  }

  /** Poll until max-requests answered (or forever when maxRequests = 0). */
  async run(): Promise<number> {
    for (;;) {
      for (const id of this.pendingRequests()) {
        this.handle(id);
        if (this.opts.maxRequests > 0 && this.served >= this.opts.maxRequests) {
          return this.served;
        }
      }
      if (this.opts.maxRequests > 0 && this.served >= this.opts.maxRequests) {
        return this.served;
      }
      await new Promise((resolve) => setTimeout(resolve, this.opts.pollMs));
    }
  }
}
