/* tslint:disable */
/* eslint-disable */

/**
 * Row-major `steps × d_angle` grid of the cyclic encoding, one row per angle
 * from 0 to 360 degrees (exclusive).
 */
export function pe_heatmap(d_angle: number, alpha: number, steps: number): Float32Array;

/**
 * RGBA bytes of one synthetic patch lit from the given crop-frame direction
 * (azimuth counterclockwise from +x, degrees).
 */
export function render_preview(azimuth_deg: number, altitude_deg: number, size: number, noise: number, seed: bigint): Uint8Array;

/**
 * Sun position over one UTC day as flat `[hour, azimuth_deg, altitude_deg]`
 * triples, every `step_min` minutes.
 */
export function solar_day_path(lat_deg: number, lon_deg: number, year: number, month: number, day: number, step_min: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly pe_heatmap: (a: number, b: number, c: number) => [number, number, number, number];
    readonly render_preview: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number, number];
    readonly solar_day_path: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
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
