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
import { Intrinsics } from "./bundle.js";
import { Image } from "./png.js";
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
export declare const DEFAULT_CONFIG: Omit<ExtractionConfig, "vocabulary">;
export declare function loadConfig(configPath: string): ExtractionConfig;
/** Unit-norm chroma-histogram embedding of a pixel set, padded to `dim`.

 * Pixels are chromaticity-normalized before binning so the embedding is
 * invariant to shading, matching the detector's color rule. */
export declare function embedPixels(pixels: Array<[number, number, number]>, dim: number): Float32Array;
/** Aligned text embedding: the vocabulary word's canonical-color histogram. */
export declare function embedText(words: string[], cfg: ExtractionConfig): Float32Array[];
export interface Detection {
    label: number;
    vocabIndex: number;
    mask: Uint8Array;
    area: number;
    box: [number, number, number, number];
    feature: Float32Array;
    confidence: number;
}
/** Chromaticity match + 4-connected components, the mock detector/segmenter. */
export declare function detectInstances(color: Image, cfg: ExtractionConfig): Detection[];
export interface RecordingMeta {
    intrinsics: Intrinsics;
    depth_scale?: number;
}
export declare function extract(inDir: string, outDir: string, cfg: ExtractionConfig): number;
