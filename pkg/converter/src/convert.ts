#!/usr/bin/env node
/**
 * One-shot converter: public Mamba checkpoint (safetensors) -> SPTQ archive
 * + model config JSON, optionally tokenizing a text file with the
 * checkpoint's tokenizer.json into a raw u32 token-id file.
 *
 * Usage:
 *   sptq-convert --checkpoint <file-or-dir> --out model.sptq --config config.json \
 *                [--tokenize text.txt --tokens-out tokens.bin]
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { convertCheckpoint } from "./names.js";
import { parseSafetensors } from "./safetensors.js";
import { writeSptq } from "./sptq.js";
import { ByteLevelBpe, TokenizerJson, tokensToBuffer } from "./tokenizer.js";

interface Options {
  checkpoint: string;
  out: string;
  config: string;
  tokenize: string | null;
  tokensOut: string | null;
}

const USAGE =
  "usage: sptq-convert --checkpoint <file-or-dir> --out model.sptq --config config.json " +
  "[--tokenize text.txt --tokens-out tokens.bin]";

export function parseArgs(argv: string[]): Options {
  const opts: Partial<Options> = { tokenize: null, tokensOut: null };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const value = argv[i + 1];
    switch (flag) {
      case "--checkpoint":
        opts.checkpoint = value;
        i++;
        break;
      case "--out":
        opts.out = value;
        i++;
        break;
      case "--config":
        opts.config = value;
        i++;
        break;
      case "--tokenize":
        opts.tokenize = value;
        i++;
        break;
      case "--tokens-out":
        opts.tokensOut = value;
        i++;
        break;
      case "--help":
      case "-h":
        console.log(USAGE);
        process.exit(0);
        break;
      default:
        throw new UsageError(`unknown flag ${flag}`);
    }
  }
  if (!opts.checkpoint || !opts.out || !opts.config) {
    throw new UsageError("--checkpoint, --out and --config are required");
  }
  if ((opts.tokenize === null) !== (opts.tokensOut === null)) {
    throw new UsageError("--tokenize and --tokens-out must be given together");
  }
  return opts as Options;
}

export class UsageError extends Error {}

function resolveCheckpointFile(checkpoint: string): string {
  const stat = fs.statSync(checkpoint);
  if (stat.isFile()) return checkpoint;
  for (const candidate of ["model.safetensors", "pytorch_model.safetensors"]) {
    const p = path.join(checkpoint, candidate);
    if (fs.existsSync(p)) return p;
  }
  throw new Error(`no .safetensors file found under ${checkpoint}`);
}

/** Stable JSON with sorted keys, 2-space indent (matches the toolkit's config files). */
function sortedJson(obj: Record<string, unknown>): string {
  const sorted = Object.fromEntries(Object.entries(obj).sort(([a], [b]) => (a < b ? -1 : 1)));
  return JSON.stringify(sorted, null, 2) + "\n";
}

export function runConvert(opts: Options): void {
  const ckptFile = resolveCheckpointFile(opts.checkpoint);
  const file = parseSafetensors(fs.readFileSync(ckptFile));
  const result = convertCheckpoint(file);

  fs.writeFileSync(opts.out, writeSptq(result.tensors));
  fs.writeFileSync(opts.config, sortedJson(result.config as unknown as Record<string, unknown>));

  console.log(`converted ${ckptFile}`);
  for (const line of result.manifest) console.log(`  ${line}`);
  for (const name of result.dropped) {
    console.log(`  dropped ${name} (no slot in the canonical scheme)`);
  }
  console.log(
    `tensors: ${result.tensors.size}, parameters: ${result.paramCount} ` +
      `(source: ${result.sourceParamCount})`
  );
  console.log(`config: ${JSON.stringify(result.config)}`);
  console.log(`wrote ${opts.out}, ${opts.config}`);

  if (opts.tokenize && opts.tokensOut) {
    const tokPath = fs.statSync(opts.checkpoint).isDirectory()
      ? path.join(opts.checkpoint, "tokenizer.json")
      : path.join(path.dirname(ckptFile), "tokenizer.json");
    if (!fs.existsSync(tokPath)) {
      throw new Error(`--tokenize requires ${tokPath}`);
    }
    const tokenizer = new ByteLevelBpe(
      JSON.parse(fs.readFileSync(tokPath, "utf8")) as TokenizerJson
    );
    const ids = tokenizer.encode(fs.readFileSync(opts.tokenize, "utf8"));
    fs.writeFileSync(opts.tokensOut, tokensToBuffer(ids));
    console.log(`tokenized ${opts.tokenize}: ${ids.length} ids -> ${opts.tokensOut}`);
  }
}

const isMain =
  process.argv[1] !== undefined &&
  import.meta.url === new URL(`file://${path.resolve(process.argv[1])}`).href;

if (isMain) {
  try {
    runConvert(parseArgs(process.argv.slice(2)));
  } catch (e) {
    if (e instanceof UsageError) {
      console.error(`error: ${e.message}\n${USAGE}`);
      process.exit(2);
    }
    console.error(`error: ${(e as Error).message}`);
    process.exit(1);
  }
}
