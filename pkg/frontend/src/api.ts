import type {
  ApiErrorBody,
  DecisionRequest,
  EffortReport,
  ReviewItem,
} from "./types.js";

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ ok: boolean; status: number; json(): Promise<unknown> }>;

/** Error carrying the server's {code, message} body and HTTP status. */
export class ApiError extends Error {
  readonly code: string;
  readonly status: number;

  constructor(status: number, body: ApiErrorBody) {
    super(body.message);
    this.code = body.code;
    this.status = status;
  }
}

/** Network-level failure (server unreachable), distinct from API errors. */
export class ServiceUnavailable extends Error {}

export interface QueueFilters {
  tier?: string;
  status?: string;
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike,
  ) {}

  private async request<T>(
    path: string,
    init?: { method?: string; body?: string },
  ): Promise<T> {
    let response;
    try {
      response = await this.fetchImpl(this.baseUrl + path, {
        ...init,
        headers: init?.body ? { "content-type": "application/json" } : {},
      });
    } catch (err) {
      throw new ServiceUnavailable(String(err));
    }
    const payload = (await response.json()) as T | ApiErrorBody;
    if (!response.ok) {
      const body = payload as ApiErrorBody;
      throw new ApiError(response.status, {
        code: body.code ?? "unknown_error",
        message: body.message ?? `HTTP ${response.status}`,
      });
    }
    return payload as T;
  }

  async loadQueue(runId: string, filters: QueueFilters = {}): Promise<ReviewItem[]> {
    const params = new URLSearchParams();
    if (filters.tier) params.set("tier", filters.tier);
    if (filters.status) params.set("status", filters.status);
    const query = params.toString();
    const suffix = query ? `?${query}` : "";
    const body = await this.request<{ items: ReviewItem[] }>(
      `/api/runs/${encodeURIComponent(runId)}/queue${suffix}`,
    );
    return body.items;
  }

  async getItem(itemId: string): Promise<ReviewItem> {
    return this.request<ReviewItem>(`/api/items/${encodeURIComponent(itemId)}`);
  }

  async submitDecision(itemId: string, body: DecisionRequest): Promise<ReviewItem> {
    return this.request<ReviewItem>(
      `/api/items/${encodeURIComponent(itemId)}/decision`,
      { method: "POST", body: JSON.stringify(body) },
    );
  }

  async loadEffort(runId: string): Promise<EffortReport> {
    return this.request<EffortReport>(
      `/api/runs/${encodeURIComponent(runId)}/effort`,
    );
  }
}
