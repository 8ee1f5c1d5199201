import type {
  Decision,
  EffortReport,
  ReviewItem,
  Tier,
} from "./types.js";

export interface Filters {
  tier: string | null;
  status: string | null;
  doc: string | null;
  category: string | null;
}

export const EMPTY_FILTERS: Filters = {
  tier: null,
  status: null,
  doc: null,
  category: null,
};

export interface Banner {
  kind: "error" | "conflict" | "info";
  message: string;
}

/**
 * Client-side queue state. All item data originates from API responses;
 * the only local mutation is the optimistic status flip while a decision
 * POST is in flight, and it is rolled back verbatim on error.
 */
export interface QueueState {
  items: ReviewItem[];
  filters: Filters;
  page: number;
  pageSize: number;
  effort: EffortReport | null;
  banner: Banner | null;
  selectedId: string | null;
  // item_id -> idempotency token for the in-flight or retried decision
  pendingTokens: Record<string, string>;
  // item_id -> snapshot to restore if the POST fails
  rollback: Record<string, ReviewItem>;
}

export function initialState(pageSize = 50): QueueState {
  return {
    items: [],
    filters: { ...EMPTY_FILTERS },
    page: 0,
    pageSize,
    effort: null,
    banner: null,
    selectedId: null,
    pendingTokens: {},
    rollback: {},
  };
}

export function applyFilters(items: ReviewItem[], filters: Filters): ReviewItem[] {
  return items.filter(
    (it) =>
      (!filters.tier || it.tier === filters.tier) &&
      (!filters.status || it.status === filters.status) &&
      (!filters.doc || it.doc_id === filters.doc) &&
      (!filters.category || it.category === filters.category),
  );
}

/** Stable ordering (doc then path) so pagination survives refreshes. */
export function sortItems(items: ReviewItem[]): ReviewItem[] {
  return [...items].sort((a, b) =>
    a.doc_id !== b.doc_id
      ? a.doc_id.localeCompare(b.doc_id)
      : a.path.localeCompare(b.path),
  );
}

export function pageOf(state: QueueState): ReviewItem[] {
  const visible = sortItems(applyFilters(state.items, state.filters));
  const start = state.page * state.pageSize;
  return visible.slice(start, start + state.pageSize);
}

export function pageCount(state: QueueState): number {
  const n = applyFilters(state.items, state.filters).length;
  return Math.max(1, Math.ceil(n / state.pageSize));
}

export function groupByTier(items: ReviewItem[]): Record<Tier, ReviewItem[]> {
  const groups: Record<Tier, ReviewItem[]> = { T1: [], T2: [], T3: [] };
  for (const item of items) groups[item.tier].push(item);
  return groups;
}

export function setQueue(state: QueueState, items: ReviewItem[]): QueueState {
  return { ...state, items, banner: null };
}

export function setFilters(state: QueueState, filters: Partial<Filters>): QueueState {
  return { ...state, filters: { ...state.filters, ...filters }, page: 0 };
}

export function setEffort(state: QueueState, effort: EffortReport): QueueState {
  return { ...state, effort };
}

export function setBanner(state: QueueState, banner: Banner | null): QueueState {
  return { ...state, banner };
}

export function newToken(): string {
  const cryptoObj = (globalThis as { crypto?: { randomUUID?: () => string } }).crypto;
  if (cryptoObj?.randomUUID) return cryptoObj.randomUUID();
  return `tok-${Date.now()}-${Math.random().toString(36).slice(2)}`;
}

export class ValidationError extends Error {}

/**
 * Begin a decision: validates client-side, flips the item optimistically,
 * and returns the idempotency token to POST. A second call for the same
 * item while one is in flight reuses the token, so a double-click cannot
 * record two decisions.
 */
export function beginDecision(
  state: QueueState,
  itemId: string,
  decision: Decision,
  correctedValue?: unknown,
): { state: QueueState; token: string } {
  const item = state.items.find((it) => it.item_id === itemId);
  if (!item) throw new ValidationError(`unknown item ${itemId}`);
  if (item.status !== "Pending" && !state.pendingTokens[itemId]) {
    throw new ValidationError("item is not pending");
  }
  if (
    decision === "Corrected" &&
    (correctedValue === undefined ||
      correctedValue === null ||
      correctedValue === "")
  ) {
    throw new ValidationError("corrected value required");
  }
  const token = state.pendingTokens[itemId] ?? newToken();
  const optimistic: ReviewItem = {
    ...item,
    status: decision,
    corrected_value: decision === "Corrected" ? correctedValue : null,
  };
  return {
    token,
    state: {
      ...state,
      items: state.items.map((it) => (it.item_id === itemId ? optimistic : it)),
      pendingTokens: { ...state.pendingTokens, [itemId]: token },
      rollback: { ...state.rollback, [itemId]: state.rollback[itemId] ?? item },
    },
  };
}

/** Server confirmed: adopt the authoritative item and clear bookkeeping. */
export function confirmDecision(state: QueueState, item: ReviewItem): QueueState {
  const pendingTokens = { ...state.pendingTokens };
  const rollback = { ...state.rollback };
  delete pendingTokens[item.item_id];
  delete rollback[item.item_id];
  return {
    ...state,
    items: state.items.map((it) => (it.item_id === item.item_id ? item : it)),
    pendingTokens,
    rollback,
    banner: null,
  };
}

/** Server rejected: restore the snapshot and surface the error inline. */
export function rollbackDecision(
  state: QueueState,
  itemId: string,
  banner: Banner,
): QueueState {
  const snapshot = state.rollback[itemId];
  const pendingTokens = { ...state.pendingTokens };
  const rollback = { ...state.rollback };
  delete pendingTokens[itemId];
  delete rollback[itemId];
  return {
    ...state,
    items: snapshot
      ? state.items.map((it) => (it.item_id === itemId ? snapshot : it))
      : state.items,
    pendingTokens,
    rollback,
    banner,
  };
}
