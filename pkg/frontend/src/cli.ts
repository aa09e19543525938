#!/usr/bin/env node
/**
 * gsmind-extract: turn a posed RGB-D recording into an ingestion bundle.
 *
 *   gsmind-extract extract --in DIR --out DIR --config cfg.json
 *   gsmind-extract embed-text --config cfg.json --words "mug,table" [--out rows.bin]
 */

import * as fs from "node:fs";

import { embedText, extract, loadConfig } from "./extract.js";

function parseArgs(argv: string[]): Map<string, string> {
  const out = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    const key = argv[i];
    if (!key.startsWith("--") || i + 1 >= argv.length) {
      throw new Error(`bad argument ${key}`);
    }
    out.set(key.slice(2), argv[i + 1]);
  }
  return out;
}

function main(argv: string[]): number {
  const [command, ...rest] = argv;
  try {
    if (command === "extract") {
      const args = parseArgs(rest);
      const inDir = args.get("in");
      const outDir = args.get("out");
      const configPath = args.get("config");
      if (!inDir || !outDir || !configPath) {
        console.error("usage: gsmind-extract extract --in DIR --out DIR --config cfg.json");
        return 1;
      }
      const n = extract(inDir, outDir, loadConfig(configPath));
      console.log(`extracted ${n} frames -> ${outDir}`);
      return 0;
    }
    if (command === "embed-text") {
      const args = parseArgs(rest);
      const configPath = args.get("config");
      const words = (args.get("words") ?? "").split(",").filter((w) => w.length > 0);
      if (!configPath || words.length === 0) {
        console.error("usage: gsmind-extract embed-text --config cfg.json --words a,b");
        return 1;
      }
      const rows = embedText(words, loadConfig(configPath));
      const outPath = args.get("out");
      if (outPath) {
        const dim = rows[0].length;
        const block = Buffer.alloc(rows.length * dim * 4);
        rows.forEach((row, r) => {
          for (let i = 0; i < dim; i++) block.writeFloatLE(row[i], (r * dim + i) * 4);
        });
        fs.writeFileSync(outPath, block);
        console.log(`wrote ${rows.length} x ${dim} rows -> ${outPath}`);
      } else {
        for (const row of rows) {
          console.log(Array.from(row.subarray(0, 8)).map((v) => v.toFixed(4)).join(" ") + " ...");
        }
      }
      return 0;
    }
    console.error("usage: gsmind-extract <extract|embed-text> ...");
    return 1;
  } catch (err) {
    console.error(`error: ${(err as Error).message}`);
    return 2;
  }
}

process.exit(main(process.argv.slice(2)));
