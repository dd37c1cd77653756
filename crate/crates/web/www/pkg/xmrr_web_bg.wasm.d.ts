/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_toysession_free: (a: number, b: number) => void;
export const retrieval_vs_noise: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
export const toysession_epoch: (a: number) => number;
export const toysession_missing: (a: number) => [number, number, number, number];
export const toysession_new: (a: number, b: number, c: number) => [number, number, number];
export const toysession_step: (a: number) => [number, number, number, number];
export const triplet: (a: number, b: number, c: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
