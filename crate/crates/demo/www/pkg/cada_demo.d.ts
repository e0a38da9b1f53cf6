/* tslint:disable */
/* eslint-disable */

/**
 * A generated sample, held on the Rust side.
 */
export class DemoSample {
    free(): void;
    [Symbol.dispose](): void;
    imageRgba(): Uint8Array;
    /**
     * Ground-truth labels, one byte per pixel.
     */
    labels(): Uint8Array;
    maskRgba(): Uint8Array;
    /**
     * Generates sample `index` of the source domain (`target == false`) or
     * of the target domain displaced by `shift` (0 reproduces the source
     * look, 1 is the default target).
     */
    constructor(size: number, seed: bigint, index: bigint, shift: number, target: boolean);
    size(): number;
    trueCdr(): number;
}

/**
 * Share of the initial teacher weights still present after each of
 * `steps` averaging updates towards a frozen student: `alpha^t`.
 */
export function emaRetention(alpha: number, steps: number): Float64Array;

/**
 * Fills background holes inside the disc and disc holes inside the cup.
 */
export function fillHoles(labels: Uint8Array, size: number): Uint8Array;

/**
 * Colours a label mask for display.
 */
export function labelsToRgba(labels: Uint8Array, size: number): Uint8Array;

/**
 * Learning rate at every iteration of a polynomial-decay schedule.
 */
export function polyLrCurve(base_lr: number, max_iter: number, power: number): Float64Array;

/**
 * Scores a predicted label mask against ground truth. Returns JSON with
 * `dice_cup`, `dice_disc`, `cdr_pred`, `cdr_true`, `gamma` and
 * `degenerate`.
 */
export function scoreMask(pred: Uint8Array, truth: Uint8Array, size: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demosample_free: (a: number, b: number) => void;
    readonly demosample_imageRgba: (a: number) => [number, number];
    readonly demosample_labels: (a: number) => [number, number];
    readonly demosample_maskRgba: (a: number) => [number, number];
    readonly demosample_new: (a: number, b: bigint, c: bigint, d: number, e: number) => [number, number, number];
    readonly demosample_size: (a: number) => number;
    readonly demosample_trueCdr: (a: number) => number;
    readonly emaRetention: (a: number, b: number) => [number, number];
    readonly fillHoles: (a: number, b: number, c: number) => [number, number, number, number];
    readonly labelsToRgba: (a: number, b: number, c: number) => [number, number, number, number];
    readonly polyLrCurve: (a: number, b: number, c: number) => [number, number, number, number];
    readonly scoreMask: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
