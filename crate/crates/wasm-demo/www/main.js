import init, { Demo } from "./pkg/demoire_wasm_demo.js";

const $ = (id) => document.getElementById(id);
const status = (msg, err = false) => {
  $("status").textContent = msg;
  $("status").className = err ? "err" : "";
};

function paint(id, rgba, size) {
  const c = $(id);
  c.width = c.height = size;
  c.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
}

const fmt = (s) =>
  `PSNR ${s.psnr.toFixed(2)} dB, Y-PSNR ${s.y_psnr.toFixed(2)} dB, SSIM ${s.ssim.toFixed(3)}, ΔE ${s.delta_e.toFixed(2)}`;

for (const id of ["pitch", "contrast", "rotation"]) {
  const el = $(id);
  const show = () => (el.nextElementSibling.textContent = el.value);
  el.addEventListener("input", show);
  show();
}

await init();
const demo = new Demo();
$("model").textContent = demo.model_info();

function simulate() {
  try {
    demo.simulate($("content").value, +$("pitch").value, +$("contrast").value, +$("rotation").value, +$("seed").value >>> 0);
    const n = demo.size();
    paint("c-input", demo.input_rgba(), n);
    paint("c-target", demo.target_rgba(), n);
    $("c-output").getContext("2d").clearRect(0, 0, n, n);
    $("scores").textContent = "input: " + fmt(demo.input_scores());
    $("run").disabled = false;
    status("captured");
  } catch (e) {
    status(String(e), true);
  }
}

$("simulate").addEventListener("click", simulate);

$("run").addEventListener("click", () => {
  status("running…");
  // Let the status repaint before the synchronous forward pass.
  setTimeout(() => {
    try {
      const t0 = performance.now();
      const s = demo.demoire();
      const ms = performance.now() - t0;
      paint("c-output", demo.output_rgba(), demo.size());
      $("scores").textContent = `input: ${fmt(demo.input_scores())}\noutput: ${fmt(s)}`;
      status(`network ran in ${ms.toFixed(0)} ms`);
    } catch (e) {
      status(String(e), true);
    }
  }, 0);
});

$("ckpt").addEventListener("change", async (ev) => {
  const f = ev.target.files[0];
  if (!f) return;
  try {
    $("model").textContent = demo.load_checkpoint(new Uint8Array(await f.arrayBuffer()));
    status(`loaded ${f.name}`);
  } catch (e) {
    status(String(e), true);
  }
});

simulate();
