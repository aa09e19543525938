/**
 * Deterministic open-vocabulary extraction over posed RGB-D recordings.
 *
 * The detector/segmenter stage finds connected regions whose chromaticity
 * sits within a tolerance of a vocabulary entry; each region becomes an
 * instance mask. The embedder maps any pixel set to a unit-norm chroma
 * histogram padded to the configured feature dimension, and embed_text maps
 * a vocabulary word to the embedding of its canonical color, so image and
 * text features live in the same space by construction.
 *
 * Input recordings are directories of NNNNNN.color.png, NNNNNN.depth.png
 * (16-bit, depth_scale units per meter) and NNNNNN.pose.txt files plus a
 * recording.json with intrinsics; the output is a complete ingestion bundle.
 */

import * as fs from "node:fs";
import * as path from "node:path";

import { Intrinsics, InstanceEntry, writeFrame, writeMetadata, frameName } from "./bundle.js";
import { decodePng, Image } from "./png.js";

export interface VocabularyEntry {
  name: string;
  /** Canonical RGB albedo in [0, 1]; detection matches on chromaticity. */
  color: [number, number, number];
}

export interface ExtractionConfig {
  detector: string;
  segmenter: string;
  embedder: string;
  device: string;
  confidence_threshold: number;
  feature_dim: number;
  vocabulary: VocabularyEntry[];
  /** Chromaticity distance accepted as a vocabulary match. */
  color_tolerance: number;
  /** Regions smaller than this many pixels are discarded. */
  min_region_px: number;
  depth_scale: number;
}

export const DEFAULT_CONFIG: Omit<ExtractionConfig, "vocabulary"> = {
  detector: "mock-chroma-detector@1",
  segmenter: "mock-connected-components@1",
  embedder: "mock-chroma-histogram@1",
  device: "cpu",
  confidence_threshold: 0.5,
  feature_dim: 512,
  color_tolerance: 0.12,
  min_region_px: 12,
  depth_scale: 1000.0,
};

export function loadConfig(configPath: string): ExtractionConfig {
  const doc = JSON.parse(fs.readFileSync(configPath, "utf-8"));
  const cfg = { ...DEFAULT_CONFIG, ...doc } as ExtractionConfig;
  if (!Array.isArray(cfg.vocabulary) || cfg.vocabulary.length === 0) {
    throw new Error("config needs a non-empty vocabulary");
  }
  if (cfg.feature_dim < 64) {
    throw new Error(`feature_dim ${cfg.feature_dim} below the 64 histogram bins`);
  }
  return cfg;
}

const HIST_BINS = 4; // per channel -> 64-bin chroma histogram

function chroma(r: number, g: number, b: number): [number, number, number] {
  const norm = Math.hypot(r, g, b);
  return norm > 0 ? [r / norm, g / norm, b / norm] : [0, 0, 0];
}

/** Unit-norm chroma-histogram embedding of a pixel set, padded to `dim`.

 * Pixels are chromaticity-normalized before binning so the embedding is
 * invariant to shading, matching the detector's color rule. */
export function embedPixels(
  pixels: Array<[number, number, number]>,
  dim: number
): Float32Array {
  const hist = new Float64Array(HIST_BINS ** 3);
  for (const [r, g, b] of pixels) {
    const [cr, cg, cb] = chroma(r, g, b);
    const q = (v: number) =>
      Math.min(HIST_BINS - 1, Math.max(0, Math.floor(v * HIST_BINS)));
    hist[q(cr) * HIST_BINS * HIST_BINS + q(cg) * HIST_BINS + q(cb)] += 1;
  }
  let norm = Math.hypot(...hist);
  const out = new Float32Array(dim);
  if (norm === 0) {
    out[0] = 1;
    return out;
  }
  for (let i = 0; i < hist.length; i++) {
    out[i] = hist[i] / norm;
  }
  // float32 rounding can leave the norm slightly off; renormalize exactly
  let n32 = 0;
  for (let i = 0; i < dim; i++) n32 += out[i] * out[i];
  n32 = Math.sqrt(n32);
  for (let i = 0; i < dim; i++) out[i] = out[i] / n32;
  return out;
}

/** Aligned text embedding: the vocabulary word's canonical-color histogram. */
export function embedText(words: string[], cfg: ExtractionConfig): Float32Array[] {
  return words.map((word) => {
    const entry = cfg.vocabulary.find((v) => v.name === word);
    if (!entry) {
      return embedPixels([], cfg.feature_dim);
    }
    return embedPixels([entry.color], cfg.feature_dim);
  });
}

export interface Detection {
  label: number;
  vocabIndex: number;
  mask: Uint8Array; // H*W, 1 inside
  area: number;
  box: [number, number, number, number];
  feature: Float32Array;
  confidence: number;
}

/** Chromaticity match + 4-connected components, the mock detector/segmenter. */
export function detectInstances(color: Image, cfg: ExtractionConfig): Detection[] {
  const { width, height } = color;
  const data = color.data as Uint8Array;
  const vocabChroma = cfg.vocabulary.map((v) => chroma(...v.color));
  const match = new Int16Array(width * height).fill(-1);
  for (let p = 0; p < width * height; p++) {
    const [r, g, b] = chroma(data[p * 3] / 255, data[p * 3 + 1] / 255, data[p * 3 + 2] / 255);
    let best = -1;
    let bestDist = cfg.color_tolerance;
    for (let v = 0; v < vocabChroma.length; v++) {
      const [cr, cg, cb] = vocabChroma[v];
      const d = Math.hypot(r - cr, g - cg, b - cb);
      if (d < bestDist) {
        best = v;
        bestDist = d;
      }
    }
    match[p] = best;
  }

  const component = new Int32Array(width * height).fill(-1);
  const detections: Detection[] = [];
  let nextLabel = 1;
  for (let start = 0; start < width * height; start++) {
    if (match[start] < 0 || component[start] >= 0) continue;
    const vocabIndex = match[start];
    const stack = [start];
    const members: number[] = [];
    component[start] = nextLabel;
    while (stack.length > 0) {
      const p = stack.pop()!;
      members.push(p);
      const x = p % width;
      const y = (p - x) / width;
      for (const [nx, ny] of [[x - 1, y], [x + 1, y], [x, y - 1], [x, y + 1]]) {
        if (nx < 0 || nx >= width || ny < 0 || ny >= height) continue;
        const q = ny * width + nx;
        if (component[q] < 0 && match[q] === vocabIndex) {
          component[q] = nextLabel;
          stack.push(q);
        }
      }
    }
    if (members.length < cfg.min_region_px) {
      continue;
    }
    let x0 = width, y0 = height, x1 = 0, y1 = 0;
    const mask = new Uint8Array(width * height);
    const pixels: Array<[number, number, number]> = [];
    for (const p of members) {
      mask[p] = 1;
      const x = p % width;
      const y = (p - x) / width;
      x0 = Math.min(x0, x);
      x1 = Math.max(x1, x);
      y0 = Math.min(y0, y);
      y1 = Math.max(y1, y);
      pixels.push([data[p * 3] / 255, data[p * 3 + 1] / 255, data[p * 3 + 2] / 255]);
    }
    const feature = embedPixels(pixels, cfg.feature_dim);
    const text = embedText([cfg.vocabulary[vocabIndex].name], cfg)[0];
    let cosine = 0;
    for (let i = 0; i < feature.length; i++) cosine += feature[i] * text[i];
    if (cosine < cfg.confidence_threshold) {
      continue;
    }
    detections.push({
      label: nextLabel,
      vocabIndex,
      mask,
      area: members.length,
      box: [x0, y0, x1, y1],
      feature,
      confidence: cosine,
    });
    nextLabel += 1;
  }
  return detections;
}

export interface RecordingMeta {
  intrinsics: Intrinsics;
  depth_scale?: number;
}

export function extract(inDir: string, outDir: string, cfg: ExtractionConfig): number {
  const metaPath = path.join(inDir, "recording.json");
  if (!fs.existsSync(metaPath)) {
    throw new Error(`missing ${metaPath}`);
  }
  const meta = JSON.parse(fs.readFileSync(metaPath, "utf-8")) as RecordingMeta;
  const depthScale = meta.depth_scale ?? cfg.depth_scale;

  const frameIndices: number[] = [];
  for (const name of fs.readdirSync(inDir).sort()) {
    const m = name.match(/^(\d{6})\.color\.png$/);
    if (m) frameIndices.push(Number(m[1]));
  }
  if (frameIndices.length === 0) {
    throw new Error(`no NNNNNN.color.png frames under ${inDir}`);
  }

  writeMetadata(outDir, meta.intrinsics, depthScale, cfg.feature_dim, frameIndices.length);
  for (const index of frameIndices) {
    const color = decodePng(fs.readFileSync(path.join(inDir, frameName(index, "color.png"))));
    const depth = decodePng(fs.readFileSync(path.join(inDir, frameName(index, "depth.png"))));
    const poseText = fs.readFileSync(path.join(inDir, frameName(index, "pose.txt")), "utf-8");
    if (color.width !== meta.intrinsics.width || color.height !== meta.intrinsics.height) {
      throw new Error(`frame ${index}: color size mismatch`);
    }

    const detections = detectInstances(color, cfg);
    const labels = new Uint16Array(color.width * color.height);
    const entries: Record<string, InstanceEntry> = {};
    const features: Float32Array[] = [];
    detections.forEach((det, row) => {
      for (let p = 0; p < det.mask.length; p++) {
        if (det.mask[p]) labels[p] = det.label;
      }
      entries[String(det.label)] = {
        box: det.box,
        class_hint: cfg.vocabulary[det.vocabIndex].name,
        row,
      };
      features.push(det.feature);
    });
    writeFrame(outDir, index, color, depth, poseText, labels, entries, features);
  }
  return frameIndices.length;
}
