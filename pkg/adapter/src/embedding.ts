/** Exposure conditioning: a vector embedding interpolated between the bright
 *  and dark chrome-ball prompts as a function of ev.
 *
 *  Without real text-encoder weights the prompt embeddings are deterministic
 *  pseudo-random unit vectors derived from the prompt text, which preserves
 *  every algebraic property the pipeline relies on (the interpolation is
 *  exact at both endpoints and linear in ev). A JSON file with real vectors
 *  can be supplied via --model-path.
 */

import * as crypto from "node:crypto";
import * as fs from "node:fs";

export const PROMPT_MAX = "perfect mirrored reflective chrome ball spheres";
export const PROMPT_MIN = "perfect black dark mirrored reflective chrome ball spheres";
export const EMBED_DIM = 768;

export function promptEmbedding(prompt: string, dim: number = EMBED_DIM): Float64Array {
  const out = new Float64Array(dim);
  let counter = 0;
  let filled = 0;
  while (filled < dim) {
    const h = crypto.createHash("sha256").update(`${prompt}\u0000${counter}`).digest();
    for (let off = 0; off + 8 <= h.length && filled < dim; off += 8) {
      // map 64 bits to (0, 1), then Box-Muller-free uniform-to-normal-ish via
      // the inverse of the logistic, good enough for a fixed pseudo embedding
      const u = (Number(h.readBigUInt64LE(off) >> 11n) + 0.5) / 2 ** 53;
      out[filled++] = Math.log(u / (1 - u));
    }
    counter++;
  }
  let norm = 0;
  for (const v of out) norm += v * v;
  norm = Math.sqrt(norm);
  for (let i = 0; i < dim; i++) out[i] /= norm;
  return out;
}

export class ExposureEmbedding {
  readonly zetaMax: Float64Array;
  readonly zetaMin: Float64Array;
  readonly evMin: number;

  constructor(evMin: number, embeddingsPath?: string) {
    if (evMin >= 0) throw new Error(`evMin must be negative, got ${evMin}`);
    this.evMin = evMin;
    if (embeddingsPath && fs.existsSync(embeddingsPath)) {
      const doc = JSON.parse(fs.readFileSync(embeddingsPath, "utf-8"));
      this.zetaMax = Float64Array.from(doc.zeta_max);
      this.zetaMin = Float64Array.from(doc.zeta_min);
      if (this.zetaMax.length !== this.zetaMin.length) {
        throw new Error("embedding vectors must have equal length");
      }
    } else {
      this.zetaMax = promptEmbedding(PROMPT_MAX);
      this.zetaMin = promptEmbedding(PROMPT_MIN);
    }
  }

  /** zeta_ev = zeta_max + (ev / ev_min) * (zeta_min - zeta_max), ev in [ev_min, 0].
   *  The endpoints are returned as exact copies (naive lerp arithmetic would
   *  miss them by an ulp). */
  at(ev: number): Float64Array {
    if (ev > 0 || ev < this.evMin) {
      throw new Error(`ev=${ev} outside [${this.evMin}, 0]`);
    }
    const f = ev / this.evMin;
    if (f === 0) return Float64Array.from(this.zetaMax);
    if (f === 1) return Float64Array.from(this.zetaMin);
    const out = new Float64Array(this.zetaMax.length);
    for (let i = 0; i < out.length; i++) {
      out[i] = this.zetaMax[i] + f * (this.zetaMin[i] - this.zetaMax[i]);
    }
    return out;
  }

  /** Recover the interpolation fraction ev/ev_min from an embedding vector. */
  fractionOf(zeta: Float64Array): number {
    let num = 0;
    let den = 0;
    for (let i = 0; i < zeta.length; i++) {
      const d = this.zetaMin[i] - this.zetaMax[i];
      num += (zeta[i] - this.zetaMax[i]) * d;
      den += d * d;
    }
    return num / den;
  }
}
