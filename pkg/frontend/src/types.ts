export type Tier = "T1" | "T2" | "T3";

export type ItemStatus =
  | "AutoAccepted"
  | "Pending"
  | "Accepted"
  | "Corrected"
  | "Rejected";

export type Decision = "Accepted" | "Corrected" | "Rejected";

export interface ReviewItem {
  item_id: string;
  doc_id: string;
  path: string;
  category: string | null;
  tier: Tier;
  extracted_value: unknown;
  source_hint: string | null;
  confidence: string | null;
  status: ItemStatus;
  corrected_value: unknown;
  reviewer_id: string | null;
  decided_at: string | null;
}

export interface TierEffort {
  items_total: number;
  items_reviewed: number;
  fraction: number | null;
}

export type EffortReport = Record<Tier, TierEffort>;

export interface ApiErrorBody {
  code: string;
  message: string;
}

export interface DecisionRequest {
  decision: Decision;
  corrected_value?: unknown;
  reviewer_id: string;
  token: string;
}
