import { describe, expect, it } from "vitest";

import { parseSafetensors, tensorToFloat32 } from "../src/safetensors.js";
import { buildSafetensors } from "./helpers.js";

describe("safetensors reader", () => {
  it("parses names, shapes and F32 payloads", () => {
    const buf = buildSafetensors({
      a: { dtype: "F32", shape: [2, 2], values: [1, 2, 3, 4] },
      b: { dtype: "F32", shape: [3], values: [-1, 0, 31.75] },
    });
    const file = parseSafetensors(buf);
    expect([...file.tensors.keys()].sort()).toEqual(["a", "b"]);
    expect(file.tensors.get("a")!.shape).toEqual([2, 2]);
    expect(Array.from(tensorToFloat32(file, "a"))).toEqual([1, 2, 3, 4]);
    expect(Array.from(tensorToFloat32(file, "b"))).toEqual([-1, 0, 31.75]);
  });

  it("upcasts F16 exactly for representable values", () => {
    const values = [0, 1, -2, 0.5, 1.5, -31.75, 2048];
    const buf = buildSafetensors({ h: { dtype: "F16", shape: [7], values } });
    const out = tensorToFloat32(parseSafetensors(buf), "h");
    expect(Array.from(out)).toEqual(values);
  });

  it("upcasts BF16 exactly for representable values", () => {
    const values = [0, 1, -2, 0.5, 256, -0.25];
    const buf = buildSafetensors({ h: { dtype: "BF16", shape: [6], values } });
    const out = tensorToFloat32(parseSafetensors(buf), "h");
    expect(Array.from(out)).toEqual(values);
  });

  it("skips __metadata__ and keeps it available", () => {
    const buf = buildSafetensors({ a: { dtype: "F32", shape: [1], values: [5] } });
    const header = JSON.parse(buf.subarray(8, 8 + Number(buf.readBigUInt64LE(0))).toString());
    header.__metadata__ = { format: "pt" };
    const headerBytes = Buffer.from(JSON.stringify(header));
    const lenBuf = Buffer.alloc(8);
    lenBuf.writeBigUInt64LE(BigInt(headerBytes.length));
    const rebuilt = Buffer.concat([lenBuf, headerBytes, buf.subarray(8 + Number(buf.readBigUInt64LE(0)))]);
    const file = parseSafetensors(rebuilt);
    expect(file.metadata).toEqual({ format: "pt" });
    expect(file.tensors.has("__metadata__")).toBe(false);
  });

  it("rejects truncated files and unknown dtypes", () => {
    expect(() => parseSafetensors(Buffer.from([1, 2, 3]))).toThrow(/shorter/);
    const buf = buildSafetensors({ a: { dtype: "F32", shape: [1], values: [5] } });
    const file = parseSafetensors(buf);
    (file.tensors.get("a") as { dtype: string }).dtype = "I64";
    expect(() => tensorToFloat32(file, "a")).toThrow(/unsupported dtype/);
  });
});
