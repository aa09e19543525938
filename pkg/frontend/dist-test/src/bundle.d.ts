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
import { Image } from "./png.js";
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
export declare function frameName(index: number, suffix: string): string;
export declare function writeMetadata(dir: string, intrinsics: Intrinsics, depthScale: number, featureDim: number, frameCount: number): void;
export declare function writeFrame(dir: string, index: number, color: Image, depth: Image, poseText: string, labels: Uint16Array, entries: Record<string, InstanceEntry>, features: Float32Array[]): void;
