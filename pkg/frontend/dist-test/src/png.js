/**
 * Minimal PNG codec over node:zlib, covering exactly what the bundle layout
 * needs: 8-bit RGB (color frames), 8-bit grayscale, and 16-bit grayscale
 * (depth in millimeters, instance labels). No interlacing, no palettes.
 */
import * as zlib from "node:zlib";
const SIGNATURE = Buffer.from([0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a]);
const CRC_TABLE = (() => {
    const table = new Uint32Array(256);
    for (let n = 0; n < 256; n++) {
        let c = n;
        for (let k = 0; k < 8; k++) {
            c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
        }
        table[n] = c >>> 0;
    }
    return table;
})();
function crc32(buf) {
    let c = 0xffffffff;
    for (let i = 0; i < buf.length; i++) {
        c = CRC_TABLE[(c ^ buf[i]) & 0xff] ^ (c >>> 8);
    }
    return (c ^ 0xffffffff) >>> 0;
}
function chunk(type, data) {
    const head = Buffer.alloc(8);
    head.writeUInt32BE(data.length, 0);
    head.write(type, 4, "ascii");
    const crc = Buffer.alloc(4);
    crc.writeUInt32BE(crc32(Buffer.concat([head.subarray(4), data])), 0);
    return Buffer.concat([head, data, crc]);
}
export function encodePng(image) {
    const { width, height, channels, bitDepth, data } = image;
    const bytesPerSample = bitDepth / 8;
    const bpp = channels * bytesPerSample;
    const stride = width * bpp;
    const raw = Buffer.alloc(height * (stride + 1));
    let src = 0;
    for (let y = 0; y < height; y++) {
        const rowStart = y * (stride + 1);
        raw[rowStart] = 0; // filter: None
        for (let x = 0; x < width * channels; x++) {
            const v = data[src++];
            const off = rowStart + 1 + x * bytesPerSample;
            if (bitDepth === 16) {
                raw[off] = (v >> 8) & 0xff;
                raw[off + 1] = v & 0xff;
            }
            else {
                raw[off] = v & 0xff;
            }
        }
    }
    const ihdr = Buffer.alloc(13);
    ihdr.writeUInt32BE(width, 0);
    ihdr.writeUInt32BE(height, 4);
    ihdr[8] = bitDepth;
    ihdr[9] = channels === 3 ? 2 : 0; // color type: truecolor | grayscale
    const idat = zlib.deflateSync(raw, { level: 6 });
    return Buffer.concat([
        SIGNATURE,
        chunk("IHDR", ihdr),
        chunk("IDAT", idat),
        chunk("IEND", Buffer.alloc(0)),
    ]);
}
function paeth(a, b, c) {
    const p = a + b - c;
    const pa = Math.abs(p - a);
    const pb = Math.abs(p - b);
    const pc = Math.abs(p - c);
    if (pa <= pb && pa <= pc)
        return a;
    if (pb <= pc)
        return b;
    return c;
}
export function decodePng(buf) {
    if (!buf.subarray(0, 8).equals(SIGNATURE)) {
        throw new Error("not a PNG file");
    }
    let width = 0;
    let height = 0;
    let bitDepth = 8;
    let colorType = 0;
    const idatParts = [];
    let off = 8;
    while (off < buf.length) {
        const length = buf.readUInt32BE(off);
        const type = buf.toString("ascii", off + 4, off + 8);
        const data = buf.subarray(off + 8, off + 8 + length);
        if (type === "IHDR") {
            width = data.readUInt32BE(0);
            height = data.readUInt32BE(4);
            bitDepth = data[8];
            colorType = data[9];
            if (data[12] !== 0)
                throw new Error("interlaced PNG not supported");
            if (colorType !== 0 && colorType !== 2) {
                throw new Error(`unsupported color type ${colorType}`);
            }
        }
        else if (type === "IDAT") {
            idatParts.push(data);
        }
        else if (type === "IEND") {
            break;
        }
        off += 12 + length;
    }
    const channels = colorType === 2 ? 3 : 1;
    const bytesPerSample = bitDepth / 8;
    const bpp = channels * bytesPerSample;
    const stride = width * bpp;
    const raw = zlib.inflateSync(Buffer.concat(idatParts));
    const out = Buffer.alloc(height * stride);
    for (let y = 0; y < height; y++) {
        const filter = raw[y * (stride + 1)];
        const row = raw.subarray(y * (stride + 1) + 1, (y + 1) * (stride + 1));
        const cur = out.subarray(y * stride, (y + 1) * stride);
        const prev = y > 0 ? out.subarray((y - 1) * stride, y * stride) : null;
        for (let x = 0; x < stride; x++) {
            const left = x >= bpp ? cur[x - bpp] : 0;
            const up = prev ? prev[x] : 0;
            const upLeft = prev && x >= bpp ? prev[x - bpp] : 0;
            let v = row[x];
            switch (filter) {
                case 0:
                    break;
                case 1:
                    v = (v + left) & 0xff;
                    break;
                case 2:
                    v = (v + up) & 0xff;
                    break;
                case 3:
                    v = (v + ((left + up) >> 1)) & 0xff;
                    break;
                case 4:
                    v = (v + paeth(left, up, upLeft)) & 0xff;
                    break;
                default:
                    throw new Error(`unknown PNG filter ${filter}`);
            }
            cur[x] = v;
        }
    }
    const count = width * height * channels;
    if (bitDepth === 16) {
        const data = new Uint16Array(count);
        for (let i = 0; i < count; i++) {
            data[i] = (out[i * 2] << 8) | out[i * 2 + 1];
        }
        return { width, height, channels: channels, bitDepth, data };
    }
    const data = new Uint8Array(out.subarray(0, count));
    return { width, height, channels: channels, bitDepth, data };
}
