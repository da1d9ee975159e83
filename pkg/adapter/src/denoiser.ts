/** Latent DDIM sampler with classifier-free guidance over a pluggable model.
 *
 *  The sampler implements the real inference procedure: encode the composite
 *  to a latent, perturb it to the requested noise level, run k deterministic
 *  denoising steps combining conditional and unconditional noise predictions
 *  at the given guidance scale, decode. The built-in model is procedural (no
 *  learned weights ship with this package): its clean-image prediction pulls
 *  masked pixels toward an exposure- and depth-consistent smoothing of the
 *  composite, which is enough to exercise the full protocol end to end.
 */

import { FloatImage, boxBlur, makeImage } from "./image.js";

export interface LatentModel {
  encode(img: FloatImage): FloatImage;
  decode(lat: FloatImage, width: number, height: number): FloatImage;
  /** Clean-latent prediction; with conditioned=false the exposure/depth
   *  conditioning is dropped (the classifier-free branch). */
  predictClean(z: FloatImage, cond: Conditioning, conditioned: boolean): FloatImage;
}

export interface Conditioning {
  /** exposure interpolation fraction ev/ev_min in [0, 1] */
  exposureFraction: number;
  evMin: number;
  /** normalized inverse depth in [0, 1], latent resolution */
  depth: Float64Array;
  /** inpainting mask at latent resolution, in [0, 1] */
  mask: Float64Array;
  /** latent of the composited image (the inpainting context) */
  context: FloatImage;
}

const LATENT_STRIDE = 8;

function alphaBar(tau: number): number {
  const t = Math.min(1, Math.max(0, tau));
  const a = Math.cos((t * Math.PI) / 2) ** 2;
  return Math.min(1 - 1e-6, Math.max(1e-6, a));
}

/** Deterministic per-request noise from a 64-bit seed (xorshift + Box-Muller). */
export function gaussianNoise(n: number, seed: number): Float64Array {
  let s = BigInt(seed) & 0xffffffffffffffffn;
  if (s === 0n) s = 0x9e3779b97f4a7c15n;
  const next = () => {
    s ^= s << 13n & 0xffffffffffffffffn;
    s ^= s >> 7n;
    s ^= s << 17n & 0xffffffffffffffffn;
    return Number(s >> 11n) / 2 ** 53;
  };
  const out = new Float64Array(n);
  for (let i = 0; i < n; i += 2) {
    const u1 = Math.max(next(), 1e-12);
    const u2 = next();
    const r = Math.sqrt(-2 * Math.log(u1));
    out[i] = r * Math.cos(2 * Math.PI * u2);
    if (i + 1 < n) out[i + 1] = r * Math.sin(2 * Math.PI * u2);
  }
  return out;
}

export class ProceduralModel implements LatentModel {
  encode(img: FloatImage): FloatImage {
    const lw = Math.ceil(img.width / LATENT_STRIDE);
    const lh = Math.ceil(img.height / LATENT_STRIDE);
    const out = makeImage(lw, lh);
    const counts = new Float64Array(lw * lh);
    for (let y = 0; y < img.height; y++) {
      const ly = Math.min(lh - 1, Math.floor(y / LATENT_STRIDE));
      for (let x = 0; x < img.width; x++) {
        const lx = Math.min(lw - 1, Math.floor(x / LATENT_STRIDE));
        const li = ly * lw + lx;
        counts[li]++;
        for (let c = 0; c < 3; c++) {
          out.data[li * 3 + c] += img.data[(y * img.width + x) * 3 + c];
        }
      }
    }
    for (let i = 0; i < lw * lh; i++) {
      for (let c = 0; c < 3; c++) out.data[i * 3 + c] /= counts[i];
    }
    return out;
  }

  decode(lat: FloatImage, width: number, height: number): FloatImage {
    const out = makeImage(width, height);
    for (let y = 0; y < height; y++) {
      const fy = ((y + 0.5) / LATENT_STRIDE) - 0.5;
      const y0 = Math.max(0, Math.min(lat.height - 1, Math.floor(fy)));
      const y1 = Math.min(lat.height - 1, y0 + 1);
      const wy = Math.min(1, Math.max(0, fy - y0));
      for (let x = 0; x < width; x++) {
        const fx = ((x + 0.5) / LATENT_STRIDE) - 0.5;
        const x0 = Math.max(0, Math.min(lat.width - 1, Math.floor(fx)));
        const x1 = Math.min(lat.width - 1, x0 + 1);
        const wx = Math.min(1, Math.max(0, fx - x0));
        for (let c = 0; c < 3; c++) {
          const a = lat.data[(y0 * lat.width + x0) * 3 + c] * (1 - wx)
            + lat.data[(y0 * lat.width + x1) * 3 + c] * wx;
          const b = lat.data[(y1 * lat.width + x0) * 3 + c] * (1 - wx)
            + lat.data[(y1 * lat.width + x1) * 3 + c] * wx;
          out.data[(y * width + x) * 3 + c] = a * (1 - wy) + b * wy;
        }
      }
    }
    return out;
  }

  predictClean(z: FloatImage, cond: Conditioning, conditioned: boolean): FloatImage {
    // Keep the context outside the mask; inside, smooth the context. The
    // conditioned branch applies the exposure gain implied by the embedding
    // fraction, slightly attenuated with depth; the unconditional branch uses
    // a neutral mid-range exposure, so guidance amplifies the conditioning
    // delta exactly as classifier-free guidance does.
    const out = makeImage(z.width, z.height);
    const fraction = conditioned ? cond.exposureFraction : 0.5;
    const gain = Math.pow(2, (fraction * cond.evMin) / 2.4);
    const smooth = boxBlur(cond.context, 1);
    for (let i = 0; i < z.width * z.height; i++) {
      const m = cond.mask[i];
      const shade = conditioned ? 1.0 - 0.15 * cond.depth[i] : 1.0;
      for (let c = 0; c < 3; c++) {
        const ctx = cond.context.data[i * 3 + c];
        const ball = Math.min(1, smooth.data[i * 3 + c] * gain * shade);
        out.data[i * 3 + c] = m * ball + (1 - m) * ctx;
      }
    }
    return out;
  }
}

export interface SampleOptions {
  tau: number;
  steps: number;
  cfgScale: number;
  seed: number;
}

export interface SampleTrace {
  stepsRun: number;
}

/** Encode, perturb to tau, run k DDIM steps with CFG, decode. */
export function ddimSample(
  model: LatentModel,
  composite: FloatImage,
  cond: Conditioning,
  opts: SampleOptions,
  trace?: SampleTrace,
): FloatImage {
  const z0 = model.encode(composite);
  const n = z0.data.length;
  let z = makeImage(z0.width, z0.height);

  if (opts.tau <= 0) {
    z.data.set(z0.data);
  } else {
    const abar0 = alphaBar(opts.tau);
    const noise = gaussianNoise(n, opts.seed);
    for (let i = 0; i < n; i++) {
      z.data[i] = Math.sqrt(abar0) * z0.data[i] + Math.sqrt(1 - abar0) * noise[i];
    }
  }

  const k = Math.max(0, opts.steps);
  for (let step = 0; step < k; step++) {
    const tauHere = opts.tau * (1 - step / k);
    const tauNext = opts.tau * (1 - (step + 1) / k);
    const a = alphaBar(tauHere);
    const aNext = alphaBar(tauNext);

    const cleanCond = model.predictClean(z, cond, true);
    const cleanUncond = model.predictClean(z, cond, false);
    // classifier-free guidance applied on the noise predictions
    const zNext = makeImage(z.width, z.height);
    for (let i = 0; i < n; i++) {
      const epsC = (z.data[i] - Math.sqrt(a) * cleanCond.data[i]) / Math.sqrt(1 - a + 1e-12);
      const epsU = (z.data[i] - Math.sqrt(a) * cleanUncond.data[i]) / Math.sqrt(1 - a + 1e-12);
      const eps = epsU + opts.cfgScale * (epsC - epsU);
      const zhat0 = (z.data[i] - Math.sqrt(1 - a) * eps) / Math.sqrt(a);
      zNext.data[i] = Math.sqrt(aNext) * zhat0 + Math.sqrt(1 - aNext) * eps;
    }
    z = zNext;
    if (trace) trace.stepsRun++;
  }
  return model.decode(z, composite.width, composite.height);
}
