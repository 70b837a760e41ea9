/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_tandemdemo_free: (a: number, b: number) => void;
export const gridworld_optimal_values: (a: number) => [number, number, number, number];
export const relative_performance: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const tandemdemo_active_grid: (a: number) => [number, number];
export const tandemdemo_finished: (a: number) => number;
export const tandemdemo_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: bigint) => [number, number, number];
export const tandemdemo_passive_grid: (a: number) => [number, number];
export const tandemdemo_step: (a: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
