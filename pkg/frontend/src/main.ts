/** Entry point: camera capture, socket wiring, controls. */
import { Health, rgbaToRgb } from "./protocol.js";
import { ClientSession, FrameSource } from "./session.js";
import { buildProbStrip, render, UiRefs } from "./ui.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

/** Downscales the live video through an offscreen canvas. The preview is
 * mirrored with CSS only; the frames sent to the server are not. */
class CameraSource implements FrameSource {
  private canvas = document.createElement("canvas");
  private ctx = this.canvas.getContext("2d", { willReadFrequently: true })!;

  constructor(private video: HTMLVideoElement) {}

  grab(width: number, height: number): Uint8Array {
    this.canvas.width = width;
    this.canvas.height = height;
    this.ctx.drawImage(this.video, 0, 0, width, height);
    return rgbaToRgb(this.ctx.getImageData(0, 0, width, height).data);
  }
}

async function start(): Promise<void> {
  const refs: UiRefs = {
    status: el("status"),
    letter: el("letter"),
    confidenceBar: el("confidence-bar"),
    confidenceLabel: el("confidence-label"),
    probStrip: el("prob-strip"),
    textLine: el("text-line"),
    stabilityBar: el("stability-bar"),
  };
  const video = el<HTMLVideoElement>("preview");

  const health: Health = await (await fetch("/health")).json();
  const [, inH, inW] = health.input;
  const probBars = buildProbStrip(refs.probStrip, health.classes);
  el("model-name").textContent = `${health.model} · ${inW}×${inH}`;

  try {
    const stream = await navigator.mediaDevices.getUserMedia({
      video: { width: 320, height: 240 },
    });
    video.srcObject = stream;
    await video.play();
  } catch (err) {
    refs.status.textContent = "camera permission denied — retry to continue";
    refs.status.dataset.state = "error";
    el("retry").hidden = false;
    el("retry").onclick = () => location.reload();
    return;
  }

  const proto = location.protocol === "https:" ? "wss" : "ws";
  const socket = new WebSocket(`${proto}://${location.host}/ws`);
  socket.binaryType = "arraybuffer";

  const session = new ClientSession(socket, new CameraSource(video), {
    targetFps: 15,
    frameWidth: inW,
    frameHeight: inH,
    onEvent: () => render(session, refs, probBars),
    onError: (message) => {
      refs.status.textContent = message;
      refs.status.dataset.state = "error";
    },
  });

  socket.onopen = () => {
    session.handleOpen();
    session.start();
    render(session, refs, probBars);
  };
  socket.onclose = () => {
    session.handleClose();
    render(session, refs, probBars);
  };
  socket.onerror = () => {
    session.handleSocketError();
    render(session, refs, probBars);
  };
  socket.onmessage = (msg) => session.handleMessage(String(msg.data));

  el("clear").onclick = () => session.clear();
  el("backspace").onclick = () => session.backspace();
  const bindSlider = (id: string, out: string, apply: (v: number) => void) => {
    const input = el<HTMLInputElement>(id);
    const show = el(out);
    show.textContent = input.value;
    input.oninput = () => {
      show.textContent = input.value;
      apply(Number(input.value));
    };
  };
  bindSlider("k-slider", "k-value", (v) => session.setConfig({ k: v }));
  bindSlider("tau-slider", "tau-value", (v) => session.setConfig({ tau: v }));
  bindSlider("idle-slider", "idle-value", (v) => session.setConfig({ idleMs: v }));
}

start().catch((err) => {
  const status = document.getElementById("status");
  if (status) status.textContent = `startup failed: ${err}`;
});
