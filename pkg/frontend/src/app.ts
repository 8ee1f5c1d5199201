import { ApiClient, ApiError, ServiceUnavailable } from "./api.js";
import { keyToAction, moveSelection } from "./keyboard.js";
import {
  renderBanner,
  renderEffort,
  renderQueue,
  renderServiceUnavailable,
  T3_CHECKLIST,
} from "./render.js";
import {
  beginDecision,
  confirmDecision,
  initialState,
  pageOf,
  rollbackDecision,
  setBanner,
  setEffort,
  setFilters,
  setQueue,
  ValidationError,
  type QueueState,
} from "./state.js";
import type { Decision } from "./types.js";

/**
 * Thin DOM shell: holds the QueueState, re-renders on every transition,
 * and forwards clicks/keys to the pure state functions. All authoritative
 * data comes from the API; nothing here edits item values directly.
 */
export class ReviewApp {
  private state: QueueState = initialState();
  private checklist: Record<string, Set<number>> = {};

  constructor(
    private readonly api: ApiClient,
    private readonly runId: string,
    private readonly reviewerId: string,
    private readonly root: HTMLElement,
  ) {}

  async start(): Promise<void> {
    this.root.addEventListener("click", (ev) => this.onClick(ev));
    this.root.addEventListener("change", (ev) => this.onToggle(ev));
    document.addEventListener("keydown", (ev) => this.onKey(ev.key));
    await this.refresh();
  }

  async refresh(): Promise<void> {
    try {
      const [items, effort] = await Promise.all([
        this.api.loadQueue(this.runId, {
          tier: this.state.filters.tier ?? undefined,
          status: this.state.filters.status ?? undefined,
        }),
        this.api.loadEffort(this.runId),
      ]);
      this.state = setEffort(setQueue(this.state, items), effort);
    } catch (err) {
      if (err instanceof ServiceUnavailable) {
        this.root.innerHTML = renderServiceUnavailable();
        return;
      }
      throw err;
    }
    this.render();
  }

  setFilter(name: "tier" | "status" | "doc" | "category", value: string | null): void {
    this.state = setFilters(this.state, { [name]: value });
    this.render();
  }

  private checklistDone(itemId: string): boolean {
    return (this.checklist[itemId]?.size ?? 0) >= T3_CHECKLIST.length;
  }

  private onToggle(ev: Event): void {
    const target = ev.target as HTMLInputElement;
    if (!target?.dataset?.check) return;
    const itemId = target.dataset.item ?? "";
    const idx = Number(target.dataset.check);
    const ticked = (this.checklist[itemId] ??= new Set());
    if (target.checked) ticked.add(idx);
    else ticked.delete(idx);
    this.render();
  }

  private onClick(ev: Event): void {
    const target = ev.target as HTMLElement;
    const action = target?.dataset?.action;
    const itemId = target?.dataset?.item;
    if (!action || !itemId) return;
    if (action === "accept") void this.decide(itemId, "Accepted");
    if (action === "reject") void this.decide(itemId, "Rejected");
    if (action === "correct") this.openCorrection(itemId);
  }

  private onKey(key: string): void {
    const visible = pageOf(this.state);
    const selected =
      visible.find((it) => it.item_id === this.state.selectedId) ?? null;
    const action = keyToAction(
      key,
      selected,
      selected ? this.checklistDone(selected.item_id) : false,
    );
    if (!action) return;
    if (action.kind === "move") {
      this.state = {
        ...this.state,
        selectedId: moveSelection(visible, this.state.selectedId, action.delta),
      };
      this.render();
    } else if (action.kind === "decide" && selected) {
      void this.decide(selected.item_id, action.decision);
    } else if (action.kind === "open-correct" && selected) {
      this.openCorrection(selected.item_id);
    }
  }

  private openCorrection(itemId: string): void {
    const value = window.prompt("Corrected value (JSON or text):");
    if (value === null) return;
    let parsed: unknown = value;
    try {
      parsed = JSON.parse(value);
    } catch {
      // plain text correction
    }
    void this.decide(itemId, "Corrected", parsed);
  }

  async decide(itemId: string, decision: Decision, corrected?: unknown): Promise<void> {
    let token: string;
    try {
      const begun = beginDecision(this.state, itemId, decision, corrected);
      this.state = begun.state;
      token = begun.token;
    } catch (err) {
      if (err instanceof ValidationError) {
        this.state = setBanner(this.state, { kind: "error", message: err.message });
        this.render();
        return;
      }
      throw err;
    }
    this.render();
    try {
      const item = await this.api.submitDecision(itemId, {
        decision,
        corrected_value: decision === "Corrected" ? corrected : undefined,
        reviewer_id: this.reviewerId,
        token,
      });
      this.state = confirmDecision(this.state, item);
    } catch (err) {
      const message =
        err instanceof ApiError
          ? `${err.code}: ${err.message}`
          : "service unreachable";
      this.state = rollbackDecision(this.state, itemId, {
        kind: err instanceof ApiError && err.code === "already_decided"
          ? "conflict"
          : "error",
        message,
      });
    }
    this.render();
  }

  private render(): void {
    const done: Record<string, boolean> = {};
    for (const id of Object.keys(this.checklist)) done[id] = this.checklistDone(id);
    this.root.innerHTML =
      renderBanner(this.state.banner) +
      renderEffort(this.state.effort) +
      renderQueue(pageOf(this.state), {
        selectedId: this.state.selectedId,
        checklistDone: done,
      });
  }
}
