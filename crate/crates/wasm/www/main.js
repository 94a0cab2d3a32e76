import init, { cost, score, SearchDemo } from "./pkg/prag_wasm.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Math.max(0, Math.floor(Number($(id).value) || 0));
const fmt = (n) => Number(n).toLocaleString("en-US");

function row(cells, header = false) {
  const tr = document.createElement("tr");
  for (const c of cells) {
    const td = document.createElement(header ? "th" : "td");
    td.textContent = c;
    if (typeof c === "number") td.className = "num";
    tr.appendChild(td);
  }
  return tr;
}

function fill(table, rows) {
  table.replaceChildren(...rows);
}

function updateCost() {
  const r = JSON.parse(cost(num("c-layers"), num("c-hidden"), num("c-ffn"), num("c-rank"), num("c-bytes"), num("c-doc"), num("c-q"), num("c-t")));
  fill($("c-out"), [
    row(["adapter parameters", fmt(r.storage.params)]),
    row(["adapter size", `${r.megabytes.toFixed(2)} MB (${fmt(r.storage.bytes)} bytes)`]),
    row(["augmentation", `${fmt(r.compute.augment_decode + r.compute.augment_forward)} token-equivalents`]),
    row(["training", `${fmt(r.compute.train_forward + r.compute.train_backward)} token-equivalents`]),
    row(["offline total", `${fmt(r.compute.total)} token-equivalents`]),
    row(["input tokens, in-context", fmt(r.online.in_context_input)]),
    row(["input tokens, parametric", fmt(r.online.parametric_input)]),
    row(["saved per query", fmt(r.online.saved)]),
  ]);
}

let demo = null;

function buildCorpus() {
  if (demo) demo.free();
  try {
    demo = new SearchDemo(Math.max(1, num("s-docs")), num("s-seed"));
  } catch (e) {
    demo = null;
    $("s-info").textContent = String(e);
    return;
  }
  $("s-info").textContent = `${demo.len()} documents indexed`;
  if (!$("s-query").value) $("s-query").value = demo.title(0) ?? "";
  search();
}

function search() {
  if (!demo) return;
  const hits = JSON.parse(demo.search($("s-query").value, Math.max(1, num("s-k"))));
  const rows = [row(["score", "id", "document"], true)];
  for (const h of hits) rows.push(row([h.score.toFixed(3), h.id, h.text]));
  if (hits.length === 0) rows.push(row(["", "", "no document shares a term with the query"]));
  fill($("s-out"), rows);
}

function updateScore() {
  const s = JSON.parse(score($("f-pred").value, $("f-gold").value));
  fill($("f-out"), [
    row(["normalized prediction", JSON.stringify(s.normalized_prediction)]),
    row(["normalized gold", s.normalized_gold.map((g) => JSON.stringify(g)).join(", ")]),
    row(["token F1", s.f1.toFixed(4)]),
    row(["exact match", s.exact_match ? "yes" : "no"]),
  ]);
}

await init();
$("status").remove();
for (const id of ["c-layers", "c-hidden", "c-ffn", "c-rank", "c-bytes", "c-doc", "c-q", "c-t"]) $(id).addEventListener("input", updateCost);
$("s-build").addEventListener("click", buildCorpus);
$("s-query").addEventListener("input", search);
$("s-k").addEventListener("input", search);
$("f-pred").addEventListener("input", updateScore);
$("f-gold").addEventListener("input", updateScore);
updateCost();
buildCorpus();
updateScore();
