import { mount } from "./app.js";

const params = new URLSearchParams(window.location.search);
const root = document.getElementById("app");
const study = params.get("study");

if (!root) {
  throw new Error("missing #app element");
}
if (!study) {
  root.textContent = "Missing ?study= query parameter.";
} else {
  mount(root, {
    base: params.get("base") ?? "",
    study,
    worker: params.get("worker") ?? undefined,
  });
}
