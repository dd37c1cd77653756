/* tslint:disable */
/* eslint-disable */

/**
 * Training on the toy corpus, one epoch per call.
 */
export class ToySession {
    free(): void;
    [Symbol.dispose](): void;
    epoch(): number;
    missing(): string;
    constructor(seed: number, lr: number, use_text_only: boolean);
    /**
     * Runs one epoch and returns its record.
     */
    step(): string;
}

export function retrieval_vs_noise(n: number, dim: number, groups: number, levels: Float64Array, seed: number): string;

/**
 * Points are passed flat: `[ai.x, ai.y, bi.x, bi.y, aj.x, aj.y, bj.x, bj.y]`.
 */
export function triplet(points: Float64Array, margin: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_toysession_free: (a: number, b: number) => void;
    readonly retrieval_vs_noise: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly toysession_epoch: (a: number) => number;
    readonly toysession_missing: (a: number) => [number, number, number, number];
    readonly toysession_new: (a: number, b: number, c: number) => [number, number, number];
    readonly toysession_step: (a: number) => [number, number, number, number];
    readonly triplet: (a: number, b: number, c: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
