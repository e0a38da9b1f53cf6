/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demosample_free: (a: number, b: number) => void;
export const demosample_imageRgba: (a: number) => [number, number];
export const demosample_labels: (a: number) => [number, number];
export const demosample_maskRgba: (a: number) => [number, number];
export const demosample_new: (a: number, b: bigint, c: bigint, d: number, e: number) => [number, number, number];
export const demosample_size: (a: number) => number;
export const demosample_trueCdr: (a: number) => number;
export const emaRetention: (a: number, b: number) => [number, number];
export const fillHoles: (a: number, b: number, c: number) => [number, number, number, number];
export const labelsToRgba: (a: number, b: number, c: number) => [number, number, number, number];
export const polyLrCurve: (a: number, b: number, c: number) => [number, number, number, number];
export const scoreMask: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
