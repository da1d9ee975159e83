import { parseArgs } from "node:util";
import { ExposureEmbedding } from "./embedding.js";
import { ProceduralModel } from "./denoiser.js";
import { Responder } from "./exchange.js";

function checkEmbedding(evMin: number): void {
  const emb = new ExposureEmbedding(evMin);
  const atMax = emb.at(0);
  const atMin = emb.at(evMin);
  let endpointsExact = true;
  for (let i = 0; i < atMax.length; i++) {
    if (atMax[i] !== emb.zetaMax[i] || atMin[i] !== emb.zetaMin[i]) {
      endpointsExact = false;
      break;
    }
  }
  // linearity: zeta(a) + zeta(b) == zeta(max) + zeta(a + b - max) for the
  // affine map; equivalently the midpoint identity
  const a = emb.at(evMin * 0.25);
  const b = emb.at(evMin * 0.75);
  const mid = emb.at(evMin * 0.5);
  let linear = true;
  for (let i = 0; i < a.length; i++) {
    if (Math.abs(0.5 * (a[i] + b[i]) - mid[i]) > 1e-12) {
      linear = false;
      break;
    }
  }
  console.log(JSON.stringify({ endpoints_exact: endpointsExact, linear }));
}

async function main(): Promise<number> {
  const { values } = parseArgs({
    options: {
      exchange: { type: "string" },
      "model-path": { type: "string" },
      "ev-min": { type: "string", default: "-5" },
      "poll-ms": { type: "string", default: "100" },
      "max-requests": { type: "string", default: "0" },
      "check-embedding": { type: "boolean", default: false },
    },
  });

  const evMin = Number.parseFloat(values["ev-min"] ?? "-5");
  if (values["check-embedding"]) {
    checkEmbedding(evMin);
    return 0;
  }
  if (!values.exchange) {
    console.error("usage: cli.js --exchange <dir> [--model-path p] [--ev-min -5] " +
      "[--poll-ms 100] [--max-requests N] | --check-embedding");
    return 1;
  }
  const responder = new Responder(new ProceduralModel(), {
    exchangeDir: values.exchange,
    evMin,
    embeddingsPath: values["model-path"],
    pollMs: Number.parseInt(values["poll-ms"] ?? "100", 10),
    maxRequests: Number.parseInt(values["max-requests"] ?? "0", 10),
  });
  const served = await responder.run();
  console.log(`served ${served} request(s)`);
  return 0;
}

main().then(
  (code) => process.exit(code),
  (err) => {
    console.error(err);
    process.exit(1);
  },
);
