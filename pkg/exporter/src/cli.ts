#!/usr/bin/env node
/**
 * Export a sequence of SSFR frames from a model backend.
 *
 * Exit codes: 0 success, 2 configuration/container error.
 */
import yargs from "yargs";
import { hideBin } from "yargs/helpers";

import { ContainerError } from "./container.js";
import { ExportConfig, exportSequence } from "./export.js";
import { ProceduralBackend } from "./procedural.js";

export async function main(argv: string[]): Promise<number> {
  const args = await yargs(argv)
    .scriptName("ssfr-export")
    .option("out", { type: "string", demandOption: true, describe: "output sequence directory" })
    .option("backend", {
      type: "string", default: "procedural", choices: ["procedural"],
      describe: "model backend (real-checkpoint backends plug in here)",
    })
    .option("frames", { type: "number", default: 4 })
    .option("seed", { type: "number", default: 0 })
    .option("patch-size", { type: "number", default: 8 })
    .option("layer", {
      type: "number", default: 0,
      describe: "which decoder layer's state attention to export (head-mean)",
    })
    .strict()
    .parse();

  const cfg: ExportConfig = {
    outDir: args.out,
    patchSize: args["patch-size"],
    attentionLayer: args.layer,
  };
  try {
    const backend = new ProceduralBackend({ frames: args.frames, seed: args.seed });
    const rels = exportSequence(backend, cfg);
    console.log(`wrote ${rels.length} frames to ${cfg.outDir} (backend=${backend.name})`);
    return 0;
  } catch (err) {
    if (err instanceof ContainerError) {
      console.error(`error: ${err.message}`);
      return 2;
    }
    throw err;
  }
}

const entry = process.argv[1];
if (entry && (entry.endsWith("cli.js") || entry.endsWith("ssfr-export"))) {
  main(hideBin(process.argv)).then((rc) => process.exit(rc));
}
