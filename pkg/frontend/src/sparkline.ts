// Evidence sparkline: window-score trace as an inline SVG path, with the
// confirmed-label overlay bands (agitation red, pre-agitation grey).

export interface SparklineBand {
  startMs: number;
  endMs: number;
  kind: "agitation" | "pre_agitation";
}

export interface SparklineSpec {
  width?: number;
  height?: number;
  threshold?: number;
}

export function sparklinePath(
  evidence: [number, number][],
  width = 160,
  height = 36,
): string {
  if (evidence.length === 0) return "";
  const ts = evidence.map(([t]) => t);
  const lo = Math.min(...ts);
  const hi = Math.max(...ts);
  const span = Math.max(1, hi - lo);
  const pieces = evidence.map(([t, score], i) => {
    const x = ((t - lo) / span) * width;
    const y = height - Math.min(Math.max(score, 0), 1) * height;
    return `${i === 0 ? "M" : "L"}${x.toFixed(1)},${y.toFixed(1)}`;
  });
  return pieces.join(" ");
}

export function sparklineSvg(
  evidence: [number, number][],
  bands: SparklineBand[] = [],
  spec: SparklineSpec = {},
): string {
  const width = spec.width ?? 160;
  const height = spec.height ?? 36;
  const threshold = spec.threshold ?? 0.5;
  if (evidence.length === 0) {
    return `<svg class="spark" viewBox="0 0 ${width} ${height}"></svg>`;
  }
  const ts = evidence.map(([t]) => t);
  const lo = Math.min(...ts);
  const hi = Math.max(...ts);
  const span = Math.max(1, hi - lo);
  const bandRects = bands
    .filter((b) => b.endMs > lo && b.startMs < hi)
    .map((b) => {
      const x0 = (Math.max(b.startMs, lo) - lo) / span * width;
      const x1 = (Math.min(b.endMs, hi) - lo) / span * width;
      const cls = b.kind === "agitation" ? "band-agitation" : "band-pre";
      return `<rect class="${cls}" x="${x0.toFixed(1)}" y="0" width="${(x1 - x0).toFixed(1)}" height="${height}"/>`;
    })
    .join("");
  const thrY = height - threshold * height;
  return (
    `<svg class="spark" viewBox="0 0 ${width} ${height}" preserveAspectRatio="none">` +
    bandRects +
    `<line class="spark-threshold" x1="0" y1="${thrY}" x2="${width}" y2="${thrY}"/>` +
    `<path class="spark-line" d="${sparklinePath(evidence, width, height)}"/>` +
    `</svg>`
  );
}
