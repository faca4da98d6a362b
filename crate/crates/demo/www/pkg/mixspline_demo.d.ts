/* tslint:disable */
/* eslint-disable */

/**
 * Simulate a replicate and fit it with parameters chosen by GCV with trace
 * inflation `alpha`.
 */
export function fit_replicate(kind: string, n: number, seed: bigint, alpha: number): string;

/**
 * Fit at a fixed `log10 λ`, with every `γ` set to `gamma`.
 */
export function fit_with_lambda(kind: string, n: number, seed: bigint, log10_lambda: number, gamma: number): string;

/**
 * GCV score and true loss along the `log10 λ` axis, every `γ` set to `gamma`.
 */
export function gcv_profile(kind: string, n: number, seed: bigint, gamma: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly fit_replicate: (a: number, b: number, c: number, d: bigint, e: number) => [number, number];
    readonly fit_with_lambda: (a: number, b: number, c: number, d: bigint, e: number, f: number) => [number, number];
    readonly gcv_profile: (a: number, b: number, c: number, d: bigint, e: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
