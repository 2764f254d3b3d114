import type { ApiClient } from "./api.js";
import type { DashboardStore, EventCard } from "./store.js";
import type { ModelKind } from "./types.js";
import { sparklineSvg } from "./sparkline.js";

export interface ViewConfig {
  reviewer: string;
  timeZone: string;
}

type Tab = "alerts" | "review" | "models";

export class DashboardView {
  private tab: Tab = "alerts";
  private timeFmt: Intl.DateTimeFormat;

  constructor(
    private readonly root: HTMLElement,
    private readonly store: DashboardStore,
    private readonly api: ApiClient,
    private readonly config: ViewConfig,
  ) {
    this.timeFmt = new Intl.DateTimeFormat("en-CA", {
      timeZone: config.timeZone,
      hour12: false,
      year: "numeric",
      month: "2-digit",
      day: "2-digit",
      hour: "2-digit",
      minute: "2-digit",
      second: "2-digit",
    });
    store.subscribe(() => this.render());
  }

  /** Local-time display; raw milliseconds ride in the tooltip. */
  fmtTime(ms: number | null): { text: string; title: string } {
    if (ms === null) return { text: "ongoing", title: "no offset yet" };
    return { text: this.timeFmt.format(new Date(ms)), title: `${ms} ms` };
  }

  setTab(tab: Tab): void {
    this.tab = tab;
    this.render();
  }

  render(): void {
    const conn = this.store.connection;
    const counts = {
      alerts: this.store.cards().length,
      review: this.store.reviewQueue().length,
      models: Object.values(this.store.models).reduce((n, v) => n + v.length, 0),
    };
    this.root.innerHTML = `
      <header class="topbar">
        <h1>agitrack review</h1>
        <span class="dot ${conn === "live" ? "live" : "dead"}"></span>
        <span class="stat">${conn}</span>
        <span class="stat">reviewer <b>${escapeHtml(this.config.reviewer)}</b></span>
        <span class="stat">tz <b>${escapeHtml(this.config.timeZone)}</b></span>
      </header>
      <nav class="tabbar">
        ${(["alerts", "review", "models"] as Tab[])
          .map(
            (t) =>
              `<button class="tab ${this.tab === t ? "active" : ""}" data-tab="${t}">
                 ${t} (${counts[t]})
               </button>`,
          )
          .join("")}
      </nav>
      <main class="content" id="tab-content"></main>
    `;
    for (const button of this.root.querySelectorAll<HTMLButtonElement>(".tab")) {
      button.addEventListener("click", () => this.setTab(button.dataset.tab as Tab));
    }
    const content = this.root.querySelector<HTMLElement>("#tab-content")!;
    if (this.tab === "alerts") this.renderAlerts(content);
    else if (this.tab === "review") this.renderReview(content);
    else this.renderModels(content);
  }

  private renderAlerts(mount: HTMLElement): void {
    const cards = this.store.alertFeed();
    mount.innerHTML = cards.length
      ? cards.map((c) => this.cardHtml(c, false)).join("")
      : `<p class="empty">No events yet.</p>`;
  }

  private renderReview(mount: HTMLElement): void {
    const queue = this.store.reviewQueue();
    const done = [...this.store.byStatus("confirmed"), ...this.store.byStatus("rejected")];
    mount.innerHTML =
      (queue.length
        ? queue.map((c) => this.cardHtml(c, true)).join("")
        : `<p class="empty">Review queue is empty.</p>`) +
      (done.length
        ? `<h2 class="sub">Decided</h2>` + done.map((c) => this.cardHtml(c, false)).join("")
        : "");
    for (const form of mount.querySelectorAll<HTMLElement>(".review-controls")) {
      this.wireReviewControls(form);
    }
  }

  private cardHtml(card: EventCard, withControls: boolean): string {
    const onset = this.fmtTime(card.onsetMs);
    const offset = this.fmtTime(card.offsetMs);
    const spark = sparklineSvg(card.evidence);
    const reviewable = card.status === "closed" && !card.pendingReview;
    const recordEnd = card.recordEndMs ?? (card.offsetMs ?? card.onsetMs) + 60_000;
    return `
      <article class="card status-${card.status}" data-event="${card.id}">
        <div class="card-head">
          <span class="badge ${card.status}">${card.status}</span>
          <span class="badge modality">${card.modality}</span>
          <b>${card.id}</b>
          ${card.truncated ? `<span class="badge warn">truncated</span>` : ""}
          <span class="score">peak ${card.peakScore.toFixed(2)}</span>
        </div>
        <div class="card-times">
          <span title="${onset.title}">${onset.text}</span> →
          <span title="${offset.title}">${offset.text}</span>
        </div>
        ${spark}
        ${card.lastError ? `<p class="error">${escapeHtml(card.lastError)}</p>` : ""}
        ${
          withControls
            ? `<div class="review-controls" data-event="${card.id}">
                 <label>start <input type="number" class="adj-start"
                   min="${card.recordStartMs}" max="${recordEnd}" value="${card.onsetMs}"
                   step="1000" ${reviewable ? "" : "disabled"}></label>
                 <label>end <input type="number" class="adj-end"
                   min="${card.recordStartMs}" max="${recordEnd}" value="${card.offsetMs ?? recordEnd}"
                   step="1000" ${reviewable ? "" : "disabled"}></label>
                 <button class="confirm" ${reviewable ? "" : "disabled"}>confirm</button>
                 <button class="reject" ${reviewable ? "" : "disabled"}>reject</button>
               </div>`
            : ""
        }
      </article>`;
  }

  private wireReviewControls(form: HTMLElement): void {
    const eventId = form.dataset.event!;
    const startInput = form.querySelector<HTMLInputElement>(".adj-start")!;
    const endInput = form.querySelector<HTMLInputElement>(".adj-end")!;
    const submit = (decision: "confirm" | "reject") => {
      const card = this.store.events.get(eventId);
      if (!card) return;
      const bounds = this.store.clampBounds(
        card,
        Number(startInput.value),
        Number(endInput.value),
      );
      void this.store.submitReview(this.api, eventId, decision, this.config.reviewer, bounds);
    };
    form.querySelector<HTMLButtonElement>(".confirm")!.addEventListener("click", () =>
      submit("confirm"),
    );
    form.querySelector<HTMLButtonElement>(".reject")!.addEventListener("click", () =>
      submit("reject"),
    );
  }

  private renderModels(mount: HTMLElement): void {
    const rows = (["forest", "recurrent"] as ModelKind[])
      .map((kind) => {
        const versions = this.store.models[kind] ?? [];
        const list = versions
          .map(
            (m) =>
              `<li>v${m.version} ${m.serving ? "<b>serving</b>" : ""} ` +
              `auc ${m.auc === null ? "n/a" : m.auc.toFixed(3)}</li>`,
          )
          .join("");
        return `
          <section class="models-kind">
            <h2>${kind} <button class="retrain" data-kind="${kind}">retrain</button></h2>
            <ul>${list || "<li>none yet</li>"}</ul>
          </section>`;
      })
      .join("");
    const jobs = this.store.jobs
      .map(({ job }) => {
        const badge =
          job.swapped === false
            ? `<span class="badge warn" title="${escapeHtml(job.message ?? "")}">swap withheld</span>`
            : "";
        return `<li>${job.job_id}: <b>${job.status}</b> ${
          job.auc === null ? "" : `auc ${job.auc.toFixed(3)}`
        } ${badge}</li>`;
      })
      .join("");
    mount.innerHTML = rows + `<section><h2>Jobs</h2><ul>${jobs || "<li>none</li>"}</ul></section>`;
    for (const button of mount.querySelectorAll<HTMLButtonElement>(".retrain")) {
      button.addEventListener("click", () => {
        void this.store
          .triggerRetrain(this.api, button.dataset.kind as ModelKind)
          .then((detail) => {
            if (detail && (detail.job.status === "queued" || detail.job.status === "running")) {
              void this.store.pollJob(this.api, detail.job.job_id);
            }
          });
      });
    }
  }
}

function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}
