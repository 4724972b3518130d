/** Minimal canvas charts; no charting dependency for two tiny plots. */

export function drawSparkline(
  canvas: HTMLCanvasElement,
  values: number[],
  color = "#4878d0",
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  if (values.length === 0) return;
  const max = Math.max(...values) * 1.1 || 1;
  ctx.strokeStyle = color;
  ctx.lineWidth = 1.5;
  ctx.beginPath();
  values.forEach((v, i) => {
    const x = values.length === 1 ? width / 2 : (i / (values.length - 1)) * (width - 4) + 2;
    const y = height - 2 - (v / max) * (height - 8);
    if (i === 0) ctx.moveTo(x, y);
    else ctx.lineTo(x, y);
  });
  ctx.stroke();
  ctx.fillStyle = "#666";
  ctx.font = "10px sans-serif";
  const last = values[values.length - 1];
  ctx.fillText(`${last.toFixed(1)} ms`, 4, 10);
}

export function drawStageBars(
  canvas: HTMLCanvasElement,
  stages: Record<string, number>,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  const { width, height } = canvas;
  ctx.clearRect(0, 0, width, height);
  const entries = Object.entries(stages);
  if (entries.length === 0) return;
  const total = entries.reduce((acc, [, v]) => acc + v, 0) || 1;
  const rowH = height / entries.length;
  const colors = ["#6acc64", "#4878d0", "#d65f5f", "#956cb4"];
  entries.forEach(([name, value], i) => {
    const share = value / total;
    ctx.fillStyle = colors[i % colors.length];
    ctx.fillRect(90, i * rowH + 3, share * (width - 150), rowH - 6);
    ctx.fillStyle = "#333";
    ctx.font = "10px sans-serif";
    ctx.fillText(name, 2, i * rowH + rowH / 2 + 3);
    ctx.fillText(`${(100 * share).toFixed(1)}%`, width - 52, i * rowH + rowH / 2 + 3);
  });
}
