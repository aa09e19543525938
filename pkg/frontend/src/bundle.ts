/**
 * Writers for the gsmind ingestion bundle layout. The byte formats must
 * match the primary loader exactly:
 *
 *   metadata.json              intrinsics, depth_scale, feature_dim, frame_count
 *   frames/NNNNNN.color.png    8-bit RGB
 *   frames/NNNNNN.depth.png    16-bit grayscale, depth_scale units per meter
 *   frames/NNNNNN.pose.txt     16 numbers, 4x4 row-major camera-to-world
 *   frames/NNNNNN.labels.png   16-bit instance labels, 0 = background
 *   frames/NNNNNN.instances.json  {"<label>": {"box", "class_hint", "row"}}
 *   frames/NNNNNN.features.bin float32 LE rows x feature_dim, unit norm
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { encodePng, Image } from "./png.js";

export interface Intrinsics {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  width: number;
  height: number;
}

export interface InstanceEntry {
  box: [number, number, number, number] | null;
  class_hint: string | null;
  row: number;
}

export function frameName(index: number, suffix: string): string {
  return `${String(index).padStart(6, "0")}.${suffix}`;
}

export function writeMetadata(
  dir: string,
  intrinsics: Intrinsics,
  depthScale: number,
  featureDim: number,
  frameCount: number
): void {
  fs.mkdirSync(dir, { recursive: true });
  const doc = {
    depth_scale: depthScale,
    feature_dim: featureDim,
    frame_count: frameCount,
    intrinsics,
  };
  fs.writeFileSync(path.join(dir, "metadata.json"), JSON.stringify(doc, null, 2));
}

export function writeFrame(
  dir: string,
  index: number,
  color: Image,
  depth: Image,
  poseText: string,
  labels: Uint16Array,
  entries: Record<string, InstanceEntry>,
  features: Float32Array[]
): void {
  const framesDir = path.join(dir, "frames");
  fs.mkdirSync(framesDir, { recursive: true });
  const base = (suffix: string) => path.join(framesDir, frameName(index, suffix));

  fs.writeFileSync(base("color.png"), encodePng(color));
  fs.writeFileSync(base("depth.png"), encodePng(depth));
  fs.writeFileSync(
    base("labels.png"),
    encodePng({
      width: color.width,
      height: color.height,
      channels: 1,
      bitDepth: 16,
      data: labels,
    })
  );
  fs.writeFileSync(base("pose.txt"), poseText);
  // integer-like keys serialize in ascending numeric order by JS semantics
  fs.writeFileSync(base("instances.json"), JSON.stringify(entries));

  const dim = features.length > 0 ? features[0].length : 0;
  const block = Buffer.alloc(features.length * dim * 4);
  features.forEach((row, r) => {
    for (let i = 0; i < row.length; i++) {
      block.writeFloatLE(row[i], (r * dim + i) * 4);
    }
  });
  fs.writeFileSync(base("features.bin"), block);
}
