/** DOM rendering for the live session: letter card, probability strip,
 * assembled text, stability meter. Pure view over the session state. */
import { ClientSession, SocketState } from "./session.js";

export interface UiRefs {
  status: HTMLElement;
  letter: HTMLElement;
  confidenceBar: HTMLElement;
  confidenceLabel: HTMLElement;
  probStrip: HTMLElement;
  textLine: HTMLElement;
  stabilityBar: HTMLElement;
}

const STATE_LABELS: Record<SocketState, string> = {
  connecting: "connecting…",
  open: "live",
  closed: "disconnected",
  error: "connection error",
};

export function buildProbStrip(strip: HTMLElement, classes: string[]): HTMLElement[] {
  strip.textContent = "";
  return classes.map((label) => {
    const cell = document.createElement("div");
    cell.className = "prob-cell";
    const bar = document.createElement("div");
    bar.className = "prob-bar";
    const tag = document.createElement("span");
    tag.textContent = label;
    cell.append(bar, tag);
    strip.append(cell);
    return bar;
  });
}

/** Show the space character visibly in the assembled text line. */
export function visibleText(text: string): string {
  return text.replace(/ /g, "␣");
}

export function render(session: ClientSession, refs: UiRefs, probBars: HTMLElement[]): void {
  refs.status.textContent = STATE_LABELS[session.socketState];
  refs.status.dataset.state = session.socketState;
  const event = session.latest;
  if (event) {
    refs.letter.textContent = event.label;
    const pct = Math.round(event.prob * 100);
    refs.confidenceBar.style.width = `${pct}%`;
    refs.confidenceLabel.textContent = `${pct}%`;
    event.probs.forEach((p, i) => {
      if (probBars[i]) probBars[i].style.height = `${Math.max(2, Math.round(p * 100))}%`;
    });
  }
  refs.textLine.textContent = visibleText(session.text);
  const fill = Math.min(1, session.runEstimate / session.config.k);
  refs.stabilityBar.style.width = `${Math.round(fill * 100)}%`;
}
