/**
 * Byte-level BPE encoder reading a HF tokenizer.json (the GPT-NeoX tokenizer
 * that ships with the public Mamba checkpoints). Encode-only: the toolkit
 * consumes raw u32 token-id files and never needs to decode.
 */

const PRETOKENIZE =
  /'(?:[sdmt]|ll|ve|re)| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+/gu;

/** GPT-2 byte <-> printable-unicode table. */
function bytesToUnicode(): Map<number, string> {
  const bs: number[] = [];
  for (let b = 0x21; b <= 0x7e; b++) bs.push(b);
  for (let b = 0xa1; b <= 0xac; b++) bs.push(b);
  for (let b = 0xae; b <= 0xff; b++) bs.push(b);
  const cs = bs.slice();
  let n = 0;
  for (let b = 0; b < 256; b++) {
    if (!bs.includes(b)) {
      bs.push(b);
      cs.push(256 + n);
      n += 1;
    }
  }
  const table = new Map<number, string>();
  bs.forEach((b, i) => table.set(b, String.fromCodePoint(cs[i])));
  return table;
}

const BYTE_TABLE = bytesToUnicode();

export interface TokenizerJson {
  model: {
    type?: string;
    vocab: Record<string, number>;
    merges: Array<string | [string, string]>;
  };
  added_tokens?: Array<{ id: number; content: string }>;
}

export class ByteLevelBpe {
  private vocab: Map<string, number>;
  private ranks: Map<string, number>;
  private added: Map<string, number>;
  private cache = new Map<string, number[]>();

  constructor(json: TokenizerJson) {
    if (json.model?.type && json.model.type !== "BPE") {
      throw new Error(`unsupported tokenizer model type ${json.model.type}`);
    }
    this.vocab = new Map(Object.entries(json.model.vocab));
    this.ranks = new Map();
    json.model.merges.forEach((m, i) => {
      const key = typeof m === "string" ? m : `${m[0]} ${m[1]}`;
      this.ranks.set(key, i);
    });
    this.added = new Map();
    for (const t of json.added_tokens ?? []) {
      this.added.set(t.content, t.id);
    }
  }

  private bpe(token: string): number[] {
    const cached = this.cache.get(token);
    if (cached) return cached;
    let parts = [...token];
    while (parts.length > 1) {
      let best = -1;
      let bestRank = Number.POSITIVE_INFINITY;
      for (let i = 0; i < parts.length - 1; i++) {
        const rank = this.ranks.get(`${parts[i]} ${parts[i + 1]}`);
        if (rank !== undefined && rank < bestRank) {
          bestRank = rank;
          best = i;
        }
      }
      if (best < 0) break;
      parts = [
        ...parts.slice(0, best),
        parts[best] + parts[best + 1],
        ...parts.slice(best + 2),
      ];
    }
    const ids = parts.map((p) => {
      const id = this.vocab.get(p);
      if (id === undefined) {
        throw new Error(`tokenizer vocabulary has no entry for piece ${JSON.stringify(p)}`);
      }
      return id;
    });
    this.cache.set(token, ids);
    return ids;
  }

  private encodeSpan(text: string): number[] {
    const out: number[] = [];
    for (const piece of text.match(PRETOKENIZE) ?? []) {
      const bytes = Buffer.from(piece, "utf8");
      let mapped = "";
      for (const b of bytes) mapped += BYTE_TABLE.get(b)!;
      out.push(...this.bpe(mapped));
    }
    return out;
  }

  encode(text: string): number[] {
    if (this.added.size === 0) return this.encodeSpan(text);
    // split on added tokens (e.g. <|endoftext|>) before byte-level BPE
    const specials = [...this.added.keys()].sort((a, b) => b.length - a.length);
    const pattern = new RegExp(
      specials.map((s) => s.replace(/[.*+?^${}()|[\]\\]/g, "\\$&")).join("|"),
      "g"
    );
    const out: number[] = [];
    let last = 0;
    for (const m of text.matchAll(pattern)) {
      out.push(...this.encodeSpan(text.slice(last, m.index)));
      out.push(this.added.get(m[0])!);
      last = m.index! + m[0].length;
    }
    out.push(...this.encodeSpan(text.slice(last)));
    return out;
  }
}

/** Serialize token ids as the toolkit's raw little-endian u32 format. */
export function tokensToBuffer(ids: number[]): Buffer {
  const buf = Buffer.alloc(4 * ids.length);
  ids.forEach((id, i) => buf.writeUInt32LE(id >>> 0, 4 * i));
  return buf;
}
