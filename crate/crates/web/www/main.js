import init, { graph, stability, spectrum } from "./pkg/prism_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function series() {
  return [$("kind").value, num("channels"), num("len"), num("seed")];
}

function show(id, text, error = false) {
  $(id).textContent = text;
  $(id).className = error ? "err" : "";
}

function heatmap(canvas, m) {
  const ctx = canvas.getContext("2d");
  const n = m.length;
  const cell = canvas.width / n;
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      const shade = Math.round(255 * (1 - Math.min(1, m[i][j])));
      ctx.fillStyle = `rgb(${shade},${shade},255)`;
      ctx.fillRect(j * cell, i * cell, cell, cell);
    }
  }
}

// Draws each series as a polyline over a shared y-range.
function lines(canvas, xs, series, { logY = false, yMin, yMax } = {}) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  const f = logY ? (v) => Math.log10(Math.max(v, 1e-12)) : (v) => v;
  const all = series.flatMap((s) => s.values.map(f));
  const lo = yMin ?? Math.min(...all);
  const hi = yMax ?? Math.max(...all);
  const x0 = xs[0], x1 = xs[xs.length - 1];
  const px = (x) => pad + ((x - x0) / (x1 - x0 || 1)) * (w - 2 * pad);
  const py = (y) => h - pad - ((f(y) - lo) / (hi - lo || 1)) * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.setLineDash(s.dash ?? []);
    ctx.beginPath();
    s.values.forEach((v, i) => (i ? ctx.lineTo(px(xs[i]), py(v)) : ctx.moveTo(px(xs[i]), py(v))));
    ctx.stroke();
  }
  ctx.setLineDash([]);
  ctx.fillStyle = "#333";
  series.forEach((s, k) => {
    ctx.fillStyle = s.color;
    ctx.fillText(s.label, pad + 6, pad + 14 + 14 * k);
  });
}

function bars(canvas, values, bound) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  const bw = (w - 2 * pad) / values.length;
  const py = (v) => h - pad - v * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w - 2 * pad, h - 2 * pad);
  values.forEach((v, i) => {
    ctx.fillStyle = v < 1 ? "#4a7" : "#c44";
    ctx.fillRect(pad + i * bw + 2, py(Math.min(v, 1)), bw - 4, py(0) - py(Math.min(v, 1)));
  });
  ctx.strokeStyle = "#c80";
  ctx.setLineDash([4, 3]);
  ctx.beginPath();
  ctx.moveTo(pad, py(bound));
  ctx.lineTo(w - pad, py(bound));
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.fillStyle = "#333";
  ctx.fillText("|mu_k| per mode; dashed: 1 - gamma", pad + 6, pad + 14);
}

function drawGraph() {
  $("tau-v").textContent = $("tau").value;
  $("window-v").textContent = $("window").value;
  try {
    const g = JSON.parse(graph(...series(), num("window"), num("tau")));
    heatmap($("graph-heat"), g.adjacency);
    const eig = g.eigenvalues;
    const deg = g.adjacency.map((r) => r.filter((v) => v > 0).length);
    show("graph-info", [
      `edges            ${g.edges.length / 2}`,
      `degrees          ${deg.join(" ")}`,
      `k_min, K         ${g.params.k_min}, ${g.params.K}`,
      `eig(A_bar)       [${eig[0].toFixed(4)}, ${eig[eig.length - 1].toFixed(4)}]`,
    ].join("\n"));
  } catch (e) {
    show("graph-info", String(e), true);
  }
}

function drawStability() {
  $("kappa-v").textContent = $("kappa").value;
  $("gamma-v").textContent = $("gamma").value;
  const steps = 40;
  try {
    const s = JSON.parse(stability(...series(), num("window"), num("tau"), num("kappa"), num("gamma"), steps));
    const r = s.report;
    bars($("damping"), s.damping.map(Math.abs), r.bound_1_minus_gamma);
    const xs = s.rollout_norms.map((_, k) => k);
    const n0 = s.rollout_norms[0];
    lines($("rollout"), xs, [
      { label: "|M^s y0|", color: "#36c", values: s.rollout_norms },
      { label: "rho^s |y0|", color: "#c80", dash: [4, 3], values: xs.map((k) => n0 * r.rho_m ** k) },
    ], { logY: true });
    show("stability-info", [
      `rho(M) ${r.rho_m.toFixed(6)}   bound 1 - gamma ${r.bound_1_minus_gamma.toFixed(6)}   sharpened ${r.sharpened_bound.toFixed(6)}`,
      `hypotheses hold: ${r.hypotheses_hold}   contractive: ${r.contractive}`,
    ].join("\n"));
  } catch (e) {
    show("stability-info", String(e), true);
  }
}

function drawSpectrum() {
  $("width-v").textContent = $("width").value;
  try {
    const s = JSON.parse(spectrum(...series(), num("channel"), num("width")));
    lines($("spectrum"), s.freqs, [
      { label: "channel", color: "#36c", values: s.truth },
      { label: "moving average", color: "#c44", values: s.smoothed },
    ], { logY: true });
    const c = s.comparison;
    show("spectrum-info", [
      `peak bin ${c.truth_peak_bin} vs ${c.pred_peak_bin} (match: ${c.fundamental_match})   tail ratio ${c.tail_ratio.toExponential(3)}`,
      "band ratios " + c.per_band_ratios.map((b) => `[${b.lo}, ${b.hi}): ${b.ratio.toFixed(4)}`).join("  "),
    ].join("\n"));
  } catch (e) {
    show("spectrum-info", String(e), true);
  }
}

function drawAll() {
  drawGraph();
  drawStability();
  drawSpectrum();
}

await init();
for (const id of ["kind", "channels", "len", "seed"]) $(id).addEventListener("change", drawAll);
for (const id of ["tau", "window"]) $(id).addEventListener("input", () => { drawGraph(); drawStability(); });
for (const id of ["kappa", "gamma"]) $(id).addEventListener("input", drawStability);
for (const id of ["channel", "width"]) $(id).addEventListener("input", drawSpectrum);
drawAll();
