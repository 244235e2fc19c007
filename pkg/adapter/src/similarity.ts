// Lexical similarity backend for the service: longest-common-subsequence
// F-measure over whitespace tokens, clamped to [0, 1].  A cross-encoder
// backend can replace `scorePair` without touching the wire protocol.

export function lcsLength(a: string[], b: string[]): number {
  if (a.length === 0 || b.length === 0) return 0;
  let prev = new Array<number>(b.length + 1).fill(0);
  for (const x of a) {
    const cur = [0];
    for (let j = 1; j <= b.length; j++) {
      cur.push(x === b[j - 1] ? prev[j - 1] + 1 : Math.max(prev[j], cur[j - 1]));
    }
    prev = cur;
  }
  return prev[b.length];
}

export function scorePair(a: string, b: string): number {
  if (a === b) return 1;
  const ta = a.split(/\s+/).filter(Boolean);
  const tb = b.split(/\s+/).filter(Boolean);
  if (ta.length === 0 && tb.length === 0) return 1;
  if (ta.length === 0 || tb.length === 0) return 0;
  const lcs = lcsLength(ta, tb);
  if (lcs === 0) return 0;
  const precision = lcs / tb.length;
  const recall = lcs / ta.length;
  const f1 = (2 * precision * recall) / (precision + recall);
  return Math.min(1, Math.max(0, f1));
}
