import type { ReviewItem } from "../src/types.js";
import type { FetchLike } from "../src/api.js";

export function makeItem(overrides: Partial<ReviewItem> = {}): ReviewItem {
  return {
    item_id: "item1",
    doc_id: "doc1",
    path: "statistics.sample_size.control_group",
    category: "statistics",
    tier: "T3",
    extracted_value: 29,
    source_hint: "Table 2",
    confidence: "High",
    status: "Pending",
    corrected_value: null,
    reviewer_id: null,
    decided_at: null,
    ...overrides,
  };
}

export interface RecordedCall {
  url: string;
  method: string;
  body: unknown;
}

/** In-memory fetch double; responses are shifted per call in order. */
export function fakeFetch(
  responses: Array<{ status: number; body: unknown } | Error>,
): { fetch: FetchLike; calls: RecordedCall[] } {
  const calls: RecordedCall[] = [];
  const fetch: FetchLike = async (url, init) => {
    calls.push({
      url,
      method: init?.method ?? "GET",
      body: init?.body ? JSON.parse(init.body) : undefined,
    });
    const next = responses.shift();
    if (!next) throw new Error("fakeFetch: no response queued");
    if (next instanceof Error) throw next;
    return {
      ok: next.status >= 200 && next.status < 300,
      status: next.status,
      json: async () => next.body,
    };
  };
  return { fetch, calls };
}
