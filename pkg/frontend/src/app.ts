/** Study participation flow: join, rate every item once, finish.
 *
 * The item markup arrives from the server as a finished SVG string and is
 * inserted verbatim; nothing in here inspects or rewrites it. Ratings are
 * keyed by the server's cursor, so a duplicate submission (double click,
 * replay after reconnect) can never record twice: the server answers with
 * a cursor conflict and the app just resyncs to the current item.
 */

import { ApiError, FetchLike, NextPayload, StudyClient } from "./api.js";

export interface AppConfig {
  base: string;
  study: string;
  worker?: string;
  fetchFn?: FetchLike;
  /** Clock used for completion times; injectable for tests. */
  now?: () => number;
}

const LIKERT_POINTS = [1, 2, 3, 4, 5, 6, 7];

export class StudyApp {
  private readonly client: StudyClient;
  private readonly now: () => number;
  private sessionId = "";
  private cursor = 0;
  private shownAt = 0;
  private busy = false;
  /** Last async chain started by a DOM event; tests await this. */
  pending: Promise<void> = Promise.resolve();

  constructor(
    private readonly root: HTMLElement,
    private readonly cfg: AppConfig,
  ) {
    this.client = new StudyClient(cfg.base, cfg.fetchFn);
    this.now = cfg.now ?? (() => Date.now());
  }

  async start(): Promise<void> {
    if (this.cfg.worker) {
      await this.beginSession(this.cfg.worker);
    } else {
      this.renderJoin();
    }
  }

  private async beginSession(workerId: string): Promise<void> {
    try {
      const info = await this.client.createSession(this.cfg.study, workerId);
      this.sessionId = info.session_id;
      await this.showNext();
    } catch (e) {
      this.renderFatal(e);
    }
  }

  private async showNext(): Promise<void> {
    const payload = await this.client.next(this.sessionId);
    this.cursor = payload.cursor;
    if (payload.done) {
      this.renderDone(payload);
    } else {
      this.renderItem(payload);
      this.shownAt = this.now();
    }
  }

  private renderJoin(): void {
    const form = el("form", { id: "join-form" });
    const label = el("label", {}, "Worker id ");
    const input = el("input", { id: "worker-id", type: "text", required: "required" });
    label.appendChild(input);
    const button = el("button", { type: "submit" }, "Start");
    form.append(label, button);
    form.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const worker = input.value.trim();
      if (worker) {
        this.pending = this.beginSession(worker);
      }
    });
    this.root.replaceChildren(form);
  }

  private renderItem(payload: NextPayload): void {
    const item = payload.item;
    if (!item) {
      throw new Error("next payload has no item but is not done");
    }

    const wrap = el("div", { class: "study" });
    const progress = el(
      "p",
      { class: "progress" },
      `Item ${payload.progress.answered + 1} of ${payload.progress.total}`,
    );
    const question = el("p", { class: "question" }, item.question);

    const markup = el("div", { class: "markup" });
    markup.innerHTML = item.markup;

    const likert = el("fieldset", { class: "likert" });
    likert.appendChild(el("legend", {}, "1 = not important at all, 7 = very important"));
    for (const point of LIKERT_POINTS) {
      const option = el("label", { class: "likert-point" });
      option.appendChild(el("input", { type: "radio", name: "rating", value: String(point) }));
      option.appendChild(document.createTextNode(String(point)));
      likert.appendChild(option);
    }

    const commentRow = el("label", { class: "comment-row" }, "Comment (optional) ");
    const comment = el("textarea", { id: "comment", rows: "2" });
    commentRow.appendChild(comment);

    const submit = el("button", { id: "submit", type: "button" }, "Submit rating");
    submit.disabled = true;
    const error = el("p", { class: "error" });
    error.hidden = true;

    likert.addEventListener("change", () => {
      submit.disabled = this.busy || this.selectedRating() == null;
    });
    submit.addEventListener("click", () => {
      this.pending = this.submitCurrent(submit, comment, error);
    });

    wrap.append(progress, question, markup, likert, commentRow, submit, error);
    this.root.replaceChildren(wrap);
  }

  private selectedRating(): number | null {
    const checked = this.root.querySelector<HTMLInputElement>("input[name=rating]:checked");
    return checked ? Number(checked.value) : null;
  }

  private async submitCurrent(
    submit: HTMLButtonElement,
    comment: HTMLTextAreaElement,
    error: HTMLParagraphElement,
  ): Promise<void> {
    if (this.busy) {
      return;
    }
    const rating = this.selectedRating();
    if (rating == null) {
      return;
    }
    this.busy = true;
    submit.disabled = true;
    error.hidden = true;
    const elapsed = Math.max((this.now() - this.shownAt) / 1000, 0.001);
    const note = comment.value.trim();
    try {
      await this.client.submit(this.sessionId, {
        cursor: this.cursor,
        rating,
        completion_time_s: elapsed,
        ...(note ? { comment: note } : {}),
      });
      this.busy = false;
      await this.showNext();
    } catch (e) {
      this.busy = false;
      if (e instanceof ApiError && (e.code === "cursor-conflict" || e.code === "session-complete")) {
        // already recorded on the server; move to where it says we are
        await this.showNext();
        return;
      }
      error.textContent = describe(e);
      error.hidden = false;
      submit.disabled = this.selectedRating() == null;
    }
  }

  private renderDone(payload: NextPayload): void {
    const done = el(
      "p",
      { class: "done" },
      `All done. Thank you! You rated ${payload.progress.answered} items.`,
    );
    this.root.replaceChildren(done);
  }

  private renderFatal(e: unknown): void {
    this.root.replaceChildren(el("p", { class: "error" }, describe(e)));
  }
}

export function mount(root: HTMLElement, cfg: AppConfig): StudyApp {
  const app = new StudyApp(root, cfg);
  app.pending = app.start();
  return app;
}

function describe(e: unknown): string {
  if (e instanceof ApiError) {
    return `${e.code}: ${e.message}`;
  }
  return e instanceof Error ? e.message : String(e);
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  if (text !== undefined) {
    node.textContent = text;
  }
  return node;
}
