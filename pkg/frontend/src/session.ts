/** Client session: capture loop, server events, debounced config.
 *
 * DOM-free by design. The socket and the frame source are injected so tests
 * can drive the session with fakes, and the committed text is always a
 * mirror of the last server reply, never computed locally.
 */
import {
  Command,
  FrameReply,
  encodeFrameMessage,
  isFrameReply,
} from "./protocol.js";

export type SocketState = "connecting" | "open" | "closed" | "error";

/** Minimal view of a WebSocket: browser and `ws` both satisfy it. */
export interface SocketLike {
  readyState: number;
  send(data: ArrayBuffer | string): void;
}

const SOCKET_OPEN = 1;

/** Produces one RGB24 frame at the requested size (camera, canvas, or test). */
export interface FrameSource {
  grab(width: number, height: number): Uint8Array;
}

export interface SessionConfig {
  k: number;
  tau: number;
  idleMs: number;
}

export interface SessionOptions {
  targetFps?: number;
  frameWidth?: number;
  frameHeight?: number;
  onEvent?: (reply: FrameReply) => void;
  onError?: (message: string) => void;
  debounceMs?: number;
}

export const CONFIG_DEBOUNCE_MS = 250;

export class ClientSession {
  socketState: SocketState = "connecting";
  latest: FrameReply | null = null;
  text = "";
  framesSent = 0;
  config: SessionConfig = { k: 8, tau: 0.6, idleMs: 1500 };
  /** Display-only run estimate, 0..k, reset whenever the text changes. */
  runEstimate = 0;

  targetFps: number;
  frameWidth: number;
  frameHeight: number;

  private socket: SocketLike;
  private source: FrameSource;
  private timer: ReturnType<typeof setInterval> | null = null;
  private pendingConfig: Partial<SessionConfig> | null = null;
  private debounceTimer: ReturnType<typeof setTimeout> | null = null;
  private debounceMs: number;
  private opts: SessionOptions;

  constructor(socket: SocketLike, source: FrameSource, opts: SessionOptions = {}) {
    this.socket = socket;
    this.source = source;
    this.opts = opts;
    this.targetFps = opts.targetFps ?? 15;
    this.frameWidth = opts.frameWidth ?? 32;
    this.frameHeight = opts.frameHeight ?? 32;
    this.debounceMs = opts.debounceMs ?? CONFIG_DEBOUNCE_MS;
  }

  /** Adopt the server-reported model input size (from /health). */
  setFrameSize(width: number, height: number): void {
    this.frameWidth = width;
    this.frameHeight = height;
  }

  start(): void {
    if (this.timer !== null) return;
    this.timer = setInterval(() => this.captureOnce(), 1000 / this.targetFps);
  }

  stop(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  /** One capture-loop tick; sends nothing unless the socket is open. */
  captureOnce(): void {
    if (this.socket.readyState !== SOCKET_OPEN) return;
    const rgb = this.source.grab(this.frameWidth, this.frameHeight);
    this.socket.send(encodeFrameMessage(rgb, this.frameWidth, this.frameHeight));
    this.framesSent += 1;
  }

  handleOpen(): void {
    this.socketState = "open";
  }

  handleClose(): void {
    this.socketState = "closed";
    this.stop();
  }

  handleSocketError(): void {
    this.socketState = "error";
    this.stop();
  }

  handleMessage(raw: string): void {
    let msg: unknown;
    try {
      msg = JSON.parse(raw);
    } catch {
      this.opts.onError?.(`unparseable server message: ${raw.slice(0, 80)}`);
      return;
    }
    if (isFrameReply(msg)) {
      const reply = msg as FrameReply;
      const grew = reply.text !== this.text;
      if (grew) {
        this.runEstimate = 0;
      } else if (this.latest && reply.label === this.latest.label
                 && reply.prob >= this.config.tau) {
        this.runEstimate = Math.min(this.runEstimate + 1, this.config.k);
      } else if (reply.prob >= this.config.tau) {
        this.runEstimate = 1;
      } else {
        this.runEstimate = 0;
      }
      this.latest = reply;
      this.text = reply.text; // server truth, never computed here
      this.opts.onEvent?.(reply);
    } else if (typeof msg === "object" && msg !== null && "error" in msg) {
      this.opts.onError?.(String((msg as { error: unknown }).error));
    }
  }

  sendCommand(command: Command): void {
    if (this.socket.readyState !== SOCKET_OPEN) return;
    this.socket.send(JSON.stringify(command));
  }

  clear(): void {
    this.sendCommand({ cmd: "clear" });
  }

  backspace(): void {
    this.sendCommand({ cmd: "backspace" });
  }

  /** Slider updates funnel through here; at most one config message per
   * debounce window no matter how fast the slider moves. */
  setConfig(partial: Partial<SessionConfig>): void {
    this.config = { ...this.config, ...partial };
    this.pendingConfig = { ...(this.pendingConfig ?? {}), ...partial };
    if (this.debounceTimer === null) {
      this.debounceTimer = setTimeout(() => this.flushConfig(), this.debounceMs);
    }
  }

  flushConfig(): void {
    if (this.debounceTimer !== null) {
      clearTimeout(this.debounceTimer);
      this.debounceTimer = null;
    }
    if (this.pendingConfig === null) return;
    const out: Command = { cmd: "config" };
    if (this.pendingConfig.k !== undefined) out.k = this.pendingConfig.k;
    if (this.pendingConfig.tau !== undefined) out.tau = this.pendingConfig.tau;
    if (this.pendingConfig.idleMs !== undefined) out.idle_ms = this.pendingConfig.idleMs;
    this.pendingConfig = null;
    this.sendCommand(out);
  }
}
