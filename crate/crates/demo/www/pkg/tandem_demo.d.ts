/* tslint:disable */
/* eslint-disable */

/**
 * A tandem run advanced one iteration at a time from JavaScript.
 */
export class TandemDemo {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Grid runs only: 25 active greedy values followed by 25 greedy actions.
     */
    active_grid(): Float64Array;
    finished(): boolean;
    /**
     * `mode` is one of `vanilla`, `self_data_mix` (uses `p_self`) or
     * `fork_fixed_policy` (forks at a quarter of `iterations`).
     */
    constructor(env: string, mode: string, p_self: number, iterations: number, steps_per_iteration: number, seed: bigint);
    /**
     * Grid runs only: as [`active_grid`](Self::active_grid) for the passive agent.
     */
    passive_grid(): Float64Array;
    /**
     * Runs one iteration; returns `[iteration, active, passive, relative, disagreement]`.
     */
    step(): Float64Array;
}

/**
 * Optimal state values of the 5x5 grid, row-major, from exact value iteration.
 */
export function gridworld_optimal_values(gamma: number): Float64Array;

/**
 * Relative passive performance of two return series.
 */
export function relative_performance(active: Float64Array, passive: Float64Array): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_tandemdemo_free: (a: number, b: number) => void;
    readonly gridworld_optimal_values: (a: number) => [number, number, number, number];
    readonly relative_performance: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly tandemdemo_active_grid: (a: number) => [number, number];
    readonly tandemdemo_finished: (a: number) => number;
    readonly tandemdemo_new: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: bigint) => [number, number, number];
    readonly tandemdemo_passive_grid: (a: number) => [number, number];
    readonly tandemdemo_step: (a: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
