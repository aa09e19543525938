/**
 * Minimal PNG codec over node:zlib, covering exactly what the bundle layout
 * needs: 8-bit RGB (color frames), 8-bit grayscale, and 16-bit grayscale
 * (depth in millimeters, instance labels). No interlacing, no palettes.
 */
export interface Image {
    width: number;
    height: number;
    channels: 1 | 3;
    bitDepth: 8 | 16;
    /** Row-major samples; 16-bit values stay in [0, 65535]. */
    data: Uint8Array | Uint16Array;
}
export declare function encodePng(image: Image): Buffer;
export declare function decodePng(buf: Buffer): Image;
