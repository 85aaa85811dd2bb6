// Built with: wasm-pack build crates/web --target web --out-dir www/pkg
import init, { fixture_map, sweep, regions, cvm_vote } from "./pkg/triad_web.js";

const W = 64;
const H = 48;
const $ = (id) => document.getElementById(id);
const seed = () => Number($("seed").value) >>> 0;

function guard(out, fn) {
  try {
    out.classList.remove("err");
    fn();
  } catch (e) {
    out.classList.add("err");
    out.textContent = String(e);
  }
}

function draw(boxes = []) {
  const f = JSON.parse(fixture_map(W, H, seed()));
  const ctx = $("map").getContext("2d");
  const img = ctx.createImageData(W, H);
  f.scores.forEach((v, i) => {
    const g = Math.round(v * 255);
    const edge = f.gt[i] && !(f.gt[i - 1] && f.gt[i + 1] && f.gt[i - W] && f.gt[i + W]);
    img.data.set(edge ? [255, 0, 0, 255] : [g, g, g, 255], i * 4);
  });
  ctx.putImageData(img, 0, 0);
  ctx.strokeStyle = "#0c0";
  ctx.lineWidth = 1;
  for (const b of boxes) {
    ctx.strokeRect(b.x0 + 0.5, b.y0 + 0.5, b.x1 - b.x0 - 1, b.y1 - b.y0 - 1);
  }
}

function runSweep() {
  const out = $("sweep-out");
  guard(out, () => {
    const v = JSON.parse(sweep(W, H, seed(), $("thresholds").value));
    const auroc = v.pixel_auroc === null ? "undefined" : v.pixel_auroc.toFixed(4);
    const rows = v.rows
      .map((r) => `<tr><td>${r.threshold}</td><td>${r.tpr.toFixed(4)}</td><td>${r.fpr.toFixed(4)}</td></tr>`)
      .join("");
    out.innerHTML = `<p>pixel AUROC ${auroc}</p><table><tr><th>t</th><th>TPR</th><th>FPR</th></tr>${rows}</table>`;
  });
}

function runRegions() {
  const out = $("regions-out");
  guard(out, () => {
    const params = JSON.stringify({
      threshold: Number($("r-threshold").value),
      box_side: Number($("r-side").value),
      iou_merge: Number($("r-iou").value),
      cap: Number($("r-cap").value),
    });
    const m = JSON.parse(regions(W, H, seed(), params));
    draw(m.boxes);
    out.textContent = JSON.stringify(m, null, 2);
  });
}

function runVote() {
  const out = $("vote-out");
  guard(out, () => {
    const opinion = (p) => ({
      decision: $(`${p}-d`).value,
      normal_score_query: Number($(`${p}-q`).value),
      normal_score_reference: Number($(`${p}-r`).value),
    });
    out.textContent = cvm_vote(JSON.stringify({ zero: opinion("z"), one: opinion("o") }));
  });
}

await init();
$("seed").onchange = () => draw();
$("sweep").onclick = runSweep;
$("regions").onclick = runRegions;
$("vote").onclick = runVote;
draw();
