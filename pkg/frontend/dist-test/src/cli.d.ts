#!/usr/bin/env node
/**
 * gsmind-extract: turn a posed RGB-D recording into an ingestion bundle.
 *
 *   gsmind-extract extract --in DIR --out DIR --config cfg.json
 *   gsmind-extract embed-text --config cfg.json --words "mug,table" [--out rows.bin]
 */
export {};
