/* tslint:disable */
/* eslint-disable */

export function add_noise(rgba: Uint8Array, width: number, height: number, sigma: number, seed: number): Uint8Array;

export function attribution(chsa_ratio: number, seed: number, x: number, y: number): Float32Array;

export function count(preset: string, width: number, height: number): string;

export function probe_side(): number;

export function quality(a: Uint8Array, b: Uint8Array, width: number, height: number): string;

export function test_card(side: number): Uint8Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly add_noise: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly attribution: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly count: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly probe_side: () => number;
    readonly quality: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly test_card: (a: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
