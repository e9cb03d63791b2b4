import init, { attentionMap, intervalCurve, renderPrompt, modes } from "./pkg/intervalrec_web.js";

const $ = (id) => document.getElementById(id);

function guard(errId, fn) {
  return () => {
    try {
      fn();
      $(errId).textContent = "";
    } catch (e) {
      $(errId).textContent = String(e.message ?? e);
    }
  };
}

function heatmap(weights, labels, title) {
  const cell = 34, pad = 110, n = weights.length;
  const c = document.createElement("canvas");
  c.width = pad + n * cell + 10;
  c.height = pad + n * cell + 10;
  const g = c.getContext("2d");
  g.font = "11px sans-serif";
  g.fillText(title, 4, 14);
  for (let r = 0; r < n; r++) {
    g.fillStyle = "#222";
    g.textAlign = "right";
    g.fillText(labels[r], pad - 6, pad + r * cell + cell / 2 + 4);
    for (let k = 0; k < n; k++) {
      const w = weights[r][k];
      const x = pad + k * cell, y = pad + r * cell;
      g.fillStyle = k > r ? "#eee" : `rgba(20, 90, 200, ${w})`;
      g.fillRect(x, y, cell - 1, cell - 1);
      if (k <= r) {
        g.fillStyle = w > 0.55 ? "#fff" : "#222";
        g.textAlign = "center";
        g.fillText(w.toFixed(2), x + cell / 2, y + cell / 2 + 4);
      }
    }
  }
  g.save();
  g.textAlign = "left";
  g.fillStyle = "#222";
  for (let k = 0; k < n; k++) {
    g.save();
    g.translate(pad + k * cell + cell / 2 + 4, pad - 6);
    g.rotate(-Math.PI / 3);
    g.fillText(labels[k], 0, 0);
    g.restore();
  }
  g.restore();
  return c;
}

const drawAttention = guard("iia-err", () => {
  const map = JSON.parse(attentionMap($("iia-days").value, Number($("iia-seed").value)));
  const out = $("iia-out");
  out.replaceChildren(...map.heads.map((h, i) => heatmap(h, map.labels, `head ${i + 1}`)));
});

const COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

const drawCurve = guard("curve-err", () => {
  const curve = JSON.parse(intervalCurve(Number($("curve-max").value), 300, Number($("curve-dims").value), Number($("curve-seed").value)));
  const c = $("curve"), g = c.getContext("2d");
  const pad = 40, w = c.width - 2 * pad, h = c.height - 2 * pad;
  const all = curve.dims.flat();
  const lo = Math.min(...all), hi = Math.max(...all);
  const span = hi - lo || 1;
  const maxDay = curve.days[curve.days.length - 1];
  const px = (d) => pad + (d / maxDay) * w;
  const py = (v) => pad + h - ((v - lo) / span) * h;
  g.clearRect(0, 0, c.width, c.height);
  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, w, h);
  g.fillStyle = "#222";
  g.font = "11px sans-serif";
  g.fillText(hi.toFixed(2), 2, pad + 4);
  g.fillText(lo.toFixed(2), 2, pad + h);
  g.fillText("0", pad, pad + h + 14);
  g.fillText(`${maxDay} days`, pad + w - 40, pad + h + 14);
  curve.dims.forEach((ys, k) => {
    g.strokeStyle = COLORS[k % COLORS.length];
    g.beginPath();
    ys.forEach((v, i) => (i ? g.lineTo(px(curve.days[i]), py(v)) : g.moveTo(px(curve.days[i]), py(v))));
    g.stroke();
  });
});

const drawPrompt = guard("prompt-err", () => {
  $("prompt-out").textContent = renderPrompt(
    $("prompt-history").value,
    $("prompt-mode").value,
    $("prompt-domain").value,
    Number($("prompt-max").value),
    0,
  );
});

await init();
$("prompt-mode").replaceChildren(...modes().map((m) => new Option(m, m, m === "FULL_IIA", m === "FULL_IIA")));
for (const id of ["iia-days", "iia-seed"]) $(id).addEventListener("input", drawAttention);
for (const id of ["curve-max", "curve-dims", "curve-seed"]) $(id).addEventListener("input", drawCurve);
for (const id of ["prompt-history", "prompt-mode", "prompt-domain", "prompt-max"]) $(id).addEventListener("input", drawPrompt);
drawAttention();
drawCurve();
drawPrompt();
