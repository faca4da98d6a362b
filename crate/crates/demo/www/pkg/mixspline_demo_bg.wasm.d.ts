/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const fit_replicate: (a: number, b: number, c: number, d: bigint, e: number) => [number, number];
export const fit_with_lambda: (a: number, b: number, c: number, d: bigint, e: number, f: number) => [number, number];
export const gcv_profile: (a: number, b: number, c: number, d: bigint, e: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
