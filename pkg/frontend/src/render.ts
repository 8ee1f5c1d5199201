import type { EffortReport, ReviewItem, Tier } from "./types.js";
import { groupByTier } from "./state.js";

/** Checklist shown beside every tier-3 item; all boxes must be ticked
 * before the Accept button becomes enabled. */
export const T3_CHECKLIST = [
  "Effect direction matches the source",
  "All reported arms and comparators are present",
  "Values, units, and time points are complete",
] as const;

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function formatValue(value: unknown): string {
  if (value === null || value === undefined) return "—";
  return typeof value === "string" ? value : JSON.stringify(value);
}

export function renderBanner(banner: { kind: string; message: string } | null): string {
  if (!banner) return "";
  return `<div class="banner banner-${banner.kind}" role="alert">${escapeHtml(
    banner.message,
  )}</div>`;
}

export function renderServiceUnavailable(): string {
  return `<div class="banner banner-error" role="alert">` +
    `Review service unreachable. Retry when the server is back.</div>`;
}

export function renderEmptyState(): string {
  return `<div class="empty-state">No items match the current filters.</div>`;
}

export function renderEffort(effort: EffortReport | null): string {
  if (!effort) return "";
  const cells = (Object.keys(effort) as Tier[])
    .map((tier) => {
      const e = effort[tier];
      const pct = e.fraction === null ? "—" : `${Math.round(e.fraction * 100)}%`;
      return `<span class="effort-cell">${tier}: ${e.items_reviewed}/${e.items_total} (${pct})</span>`;
    })
    .join(" ");
  return `<div class="effort">${cells}</div>`;
}

function renderDecisionControls(item: ReviewItem, checklistDone: boolean): string {
  if (item.status !== "Pending") {
    return `<span class="decided">${escapeHtml(item.status)}</span>`;
  }
  // T3 acceptance is gated on the verification checklist; there is no
  // auto-accept control for any tier.
  const acceptDisabled = item.tier === "T3" && !checklistDone;
  const checklist =
    item.tier === "T3"
      ? `<ul class="checklist">` +
        T3_CHECKLIST.map(
          (text, i) =>
            `<li><label><input type="checkbox" data-check="${i}" ` +
            `data-item="${item.item_id}"> ${escapeHtml(text)}</label></li>`,
        ).join("") +
        `</ul>`
      : "";
  return (
    checklist +
    `<button data-action="accept" data-item="${item.item_id}"` +
    `${acceptDisabled ? " disabled" : ""}>Accept</button>` +
    `<button data-action="correct" data-item="${item.item_id}">Correct</button>` +
    `<button data-action="reject" data-item="${item.item_id}">Reject</button>`
  );
}

export function renderItem(
  item: ReviewItem,
  opts: { selected?: boolean; checklistDone?: boolean } = {},
): string {
  const classes = ["item", `tier-${item.tier}`];
  if (opts.selected) classes.push("selected");
  const confidence = item.confidence
    ? `<span class="confidence">${escapeHtml(item.confidence)}</span>`
    : "";
  const source = item.source_hint
    ? `<span class="source">${escapeHtml(item.source_hint)}</span>`
    : "";
  return (
    `<div class="${classes.join(" ")}" data-id="${item.item_id}">` +
    `<span class="path">${escapeHtml(item.doc_id)} / ${escapeHtml(item.path)}</span>` +
    `<span class="value">${escapeHtml(formatValue(item.extracted_value))}</span>` +
    confidence +
    source +
    renderDecisionControls(item, opts.checklistDone ?? false) +
    `</div>`
  );
}

export function renderQueue(
  items: ReviewItem[],
  opts: { selectedId?: string | null; checklistDone?: Record<string, boolean> } = {},
): string {
  if (items.length === 0) return renderEmptyState();
  const groups = groupByTier(items);
  const sections: string[] = [];
  for (const tier of ["T1", "T2", "T3"] as Tier[]) {
    if (groups[tier].length === 0) continue;
    const flag =
      tier === "T3"
        ? ` <span class="badge badge-mandatory">verification required</span>`
        : "";
    const body = groups[tier]
      .map((item) =>
        renderItem(item, {
          selected: item.item_id === opts.selectedId,
          checklistDone: opts.checklistDone?.[item.item_id] ?? false,
        }),
      )
      .join("");
    sections.push(
      `<section class="tier-section" data-tier="${tier}">` +
        `<h2>${tier}${flag}</h2>${body}</section>`,
    );
  }
  return sections.join("");
}
