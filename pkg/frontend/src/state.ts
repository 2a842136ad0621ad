// Client-side case lifecycle. The screen can only reach RESULT_SHOWN through
// a service response that actually carries the AI result; since the service
// withholds results on pending expert cases, the verdict is structurally
// unreachable before an acknowledged diagnosis, whatever the UI does.

import type { CaseView } from "./api.js";

export type ClientPhase =
  | "CAPTURING"
  | "SUBMITTED"
  | "AWAITING_EXPERT_INPUT"
  | "RESULT_SHOWN";

export class GatingViolation extends Error {
  constructor(message: string) {
    super(message);
    this.name = "GatingViolation";
  }
}

export class CaseFlow {
  phase: ClientPhase = "CAPTURING";
  view: CaseView | null = null;

  reset(): void {
    this.phase = "CAPTURING";
    this.view = null;
  }

  submitted(view: CaseView): ClientPhase {
    this.view = view;
    this.phase = "SUBMITTED";
    if (view.ai_result) {
      this.phase = "RESULT_SHOWN";
    } else if (view.mode === "EXPERT" && view.status === "AWAITING_EXPERT") {
      this.phase = "AWAITING_EXPERT_INPUT";
    } else {
      throw new GatingViolation(
        `case ${view.case_id}: response carries no result and is not awaiting an expert`,
      );
    }
    return this.phase;
  }

  diagnosisAcknowledged(view: CaseView): ClientPhase {
    if (!view.ai_result) {
      throw new GatingViolation(
        `case ${view.case_id}: diagnosis acknowledgment did not reveal a result`,
      );
    }
    this.view = view;
    this.phase = "RESULT_SHOWN";
    return this.phase;
  }

  rehydrate(view: CaseView): ClientPhase {
    this.view = view;
    if (view.ai_result) {
      this.phase = "RESULT_SHOWN";
    } else if (view.mode === "EXPERT" && view.status === "AWAITING_EXPERT") {
      this.phase = "AWAITING_EXPERT_INPUT";
    } else {
      this.phase = "CAPTURING";
    }
    return this.phase;
  }
}

const ACTIVE_CASE_KEY = "cervia.activeCase";

export function rememberActiveCase(storage: Storage, caseId: string): void {
  storage.setItem(ACTIVE_CASE_KEY, caseId);
}

export function activeCaseId(storage: Storage): string | null {
  return storage.getItem(ACTIVE_CASE_KEY);
}

export function clearActiveCase(storage: Storage): void {
  storage.removeItem(ACTIVE_CASE_KEY);
}
