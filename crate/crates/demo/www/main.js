import init, { edge_matrix, generate_scene, trace } from "../pkg/dga_demo.js";

const COLORS = { red: "#d33", green: "#3a3", blue: "#36d", gray: "#888", purple: "#93c" };
const canvas = document.getElementById("scene");
const ctx = canvas.getContext("2d");
let scene = null;
let checkpoint = new Uint8Array();
let nodeWeights = null;

const $ = (id) => document.getElementById(id);

function showError(e) {
  $("error").textContent = e ? String(e) : "";
}

function draw() {
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!scene) return;
  const s = canvas.width;
  scene.objects.forEach((o, i) => {
    const x = (o.cx - o.w / 2) * s, y = (o.cy - o.h / 2) * s;
    const w = o.w * s, h = o.h * s;
    ctx.fillStyle = COLORS[o.color] || "#555";
    ctx.globalAlpha = nodeWeights ? 0.25 + 0.75 * nodeWeights[i] : 0.8;
    ctx.beginPath();
    if (o.shape === "circle") {
      ctx.ellipse(x + w / 2, y + h / 2, w / 2, h / 2, 0, 0, 2 * Math.PI);
    } else if (o.shape === "triangle") {
      ctx.moveTo(x + w / 2, y);
      ctx.lineTo(x + w, y + h);
      ctx.lineTo(x, y + h);
      ctx.closePath();
    } else {
      ctx.rect(x, y, w, h);
    }
    ctx.fill();
    ctx.globalAlpha = 1;
    ctx.strokeStyle = i === scene.gt ? "#000" : "#ccc";
    ctx.lineWidth = i === scene.gt ? 2 : 1;
    ctx.strokeRect(x, y, w, h);
    ctx.fillStyle = "#000";
    ctx.fillText(String(i), x + 2, y + 10);
  });
}

function renderEdges() {
  const boxes = scene.objects.map(({ cx, cy, w, h }) => ({ cx, cy, w, h }));
  const m = JSON.parse(edge_matrix(JSON.stringify(boxes)));
  let html = "<table><tr><th></th>" + m.codes.map((_, j) => `<th>${j}</th>`).join("") + "</tr>";
  m.labels.forEach((row, i) => {
    html += `<tr><th>${i}</th>` + row.map((l, j) => `<td title="${l}">${i === j ? "" : m.codes[i][j]}</td>`).join("") + "</tr>";
  });
  $("edges").innerHTML = html + "</table>";
}

function bar(v) {
  return `<span class="bar" style="width:${Math.round(80 * v)}px"></span> ${v.toFixed(3)}`;
}

function renderTrace(t) {
  const verdict = t.predicted === t.gt ? "correct" : "wrong";
  $("result").textContent = `predicted ${t.predicted}, ground truth ${t.gt} (${verdict})`;
  $("steps").innerHTML = t.steps.map((st) => {
    const words = st.words.map((w, l) => `<tr><td>${t.tokens[l]}</td><td style="text-align:left">${bar(w)}</td></tr>`).join("");
    const nodes = st.nodes.map((w, k) => `<tr><td>${k}</td><td style="text-align:left">${bar(w)}</td></tr>`).join("");
    return `<p><b>step ${st.step}</b></p><table><tr><th>word</th><th>weight</th></tr>${words}</table>` +
      `<table style="margin-top:4px"><tr><th>node</th><th>weight</th></tr>${nodes}</table>`;
  }).join("");
  const last = t.steps[t.steps.length - 1].nodes;
  const max = Math.max(...last, 1e-12);
  nodeWeights = last.map((v) => v / max);
  draw();
}

function generate() {
  showError();
  try {
    scene = JSON.parse(generate_scene(Number($("seed").value) >>> 0, Number($("k").value), Number($("depth").value)));
    nodeWeights = null;
    $("expression").textContent = scene.tokens.join(" ");
    $("result").textContent = "";
    $("steps").innerHTML = "";
    draw();
    renderEdges();
  } catch (e) {
    showError(e);
  }
}

function run() {
  showError();
  if (!scene) return;
  try {
    renderTrace(JSON.parse(trace(JSON.stringify(scene), checkpoint)));
  } catch (e) {
    showError(e);
  }
}

$("ckpt").addEventListener("change", async (ev) => {
  const file = ev.target.files[0];
  checkpoint = file ? new Uint8Array(await file.arrayBuffer()) : new Uint8Array();
});
$("generate").addEventListener("click", generate);
$("run").addEventListener("click", run);

await init();
generate();
