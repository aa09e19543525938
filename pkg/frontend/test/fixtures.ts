/** Synthetic posed RGB-D recordings for the extractor tests. */

import * as fs from "node:fs";
import * as path from "node:path";

import { frameName, Intrinsics } from "../src/bundle.js";
import { encodePng } from "../src/png.js";
import { ExtractionConfig, DEFAULT_CONFIG, VocabularyEntry } from "../src/extract.js";

export const VOCAB: VocabularyEntry[] = [
  { name: "mug", color: [0.82, 0.12, 0.1] },
  { name: "ball", color: [0.1, 0.35, 0.85] },
];

export function testConfig(overrides: Partial<ExtractionConfig> = {}): ExtractionConfig {
  return { ...DEFAULT_CONFIG, vocabulary: VOCAB, feature_dim: 64, ...overrides };
}

export interface Blob {
  cx: number;
  cy: number;
  radius: number;
  color: [number, number, number];
}

/** Flat background with colored discs; shading scales the albedo. */
export function makeFrame(
  width: number,
  height: number,
  blobs: Blob[],
  shade = 1.0
): { color: Uint8Array; depth: Uint16Array } {
  const color = new Uint8Array(width * height * 3);
  const depth = new Uint16Array(width * height);
  for (let y = 0; y < height; y++) {
    for (let x = 0; x < width; x++) {
      const p = y * width + x;
      let rgb: [number, number, number] = [0.7, 0.68, 0.64];
      let d = 2000;
      for (const blob of blobs) {
        if (Math.hypot(x - blob.cx, y - blob.cy) <= blob.radius) {
          rgb = blob.color;
          d = 1500;
        }
      }
      color[p * 3] = Math.round(rgb[0] * shade * 255);
      color[p * 3 + 1] = Math.round(rgb[1] * shade * 255);
      color[p * 3 + 2] = Math.round(rgb[2] * shade * 255);
      depth[p] = d;
    }
  }
  return { color, depth };
}

export function writeRecording(
  dir: string,
  frames: Array<{ color: Uint8Array; depth: Uint16Array }>,
  width: number,
  height: number
): Intrinsics {
  fs.mkdirSync(dir, { recursive: true });
  const intrinsics: Intrinsics = {
    fx: width, fy: width, cx: width / 2, cy: height / 2, width, height,
  };
  fs.writeFileSync(
    path.join(dir, "recording.json"),
    JSON.stringify({ intrinsics, depth_scale: 1000.0 })
  );
  const pose = [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1].map(String).join(" ");
  frames.forEach((frame, i) => {
    fs.writeFileSync(
      path.join(dir, frameName(i, "color.png")),
      encodePng({ width, height, channels: 3, bitDepth: 8, data: frame.color })
    );
    fs.writeFileSync(
      path.join(dir, frameName(i, "depth.png")),
      encodePng({ width, height, channels: 1, bitDepth: 16, data: frame.depth })
    );
    fs.writeFileSync(path.join(dir, frameName(i, "pose.txt")), pose);
  });
  return intrinsics;
}
