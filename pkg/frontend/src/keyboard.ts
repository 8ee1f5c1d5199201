import type { ReviewItem } from "./types.js";

export type KeyAction =
  | { kind: "move"; delta: 1 | -1 }
  | { kind: "decide"; decision: "Accepted" | "Rejected" }
  | { kind: "open-correct" };

/**
 * Keyboard triage map: j/k move the selection, a accepts, r rejects,
 * c opens the correction form. Accept on a tier-3 item is refused until
 * its verification checklist is complete, mirroring the button gating.
 */
export function keyToAction(
  key: string,
  selected: ReviewItem | null,
  checklistDone: boolean,
): KeyAction | null {
  switch (key) {
    case "j":
      return { kind: "move", delta: 1 };
    case "k":
      return { kind: "move", delta: -1 };
  }
  if (!selected || selected.status !== "Pending") return null;
  switch (key) {
    case "a":
      if (selected.tier === "T3" && !checklistDone) return null;
      return { kind: "decide", decision: "Accepted" };
    case "r":
      return { kind: "decide", decision: "Rejected" };
    case "c":
      return { kind: "open-correct" };
    default:
      return null;
  }
}

export function moveSelection(
  items: ReviewItem[],
  selectedId: string | null,
  delta: 1 | -1,
): string | null {
  if (items.length === 0) return null;
  const index = items.findIndex((it) => it.item_id === selectedId);
  if (index === -1) return items[0]?.item_id ?? null;
  const next = Math.min(items.length - 1, Math.max(0, index + delta));
  return items[next]?.item_id ?? null;
}
