// Records browser: filterable case list, detail pane, wired-export trigger.

import type { CaseStatus, CaseView, ScreeningApi } from "./api.js";
import { clear, h } from "./dom.js";

export class RecordsView {
  private cases: CaseView[] = [];
  private selected: CaseView | null = null;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ScreeningApi,
  ) {}

  async refresh(filter: { patient_ref?: string; status?: CaseStatus } = {}): Promise<void> {
    this.cases = await this.api.listCases(filter);
    this.selected = null;
    this.render();
  }

  render(): void {
    clear(this.root);
    const patientFilter = h("input", {
      type: "text",
      id: "filter-patient",
      placeholder: "patient reference",
    });
    const statusFilter = h(
      "select",
      { id: "filter-status" },
      h("option", { value: "" }, "any status"),
      h("option", { value: "AWAITING_EXPERT" }, "awaiting expert"),
      h("option", { value: "COMPLETE" }, "complete"),
    ) as HTMLSelectElement;
    const applyButton = h(
      "button",
      {
        type: "button",
        id: "apply-filters",
        onclick: () => {
          const status = statusFilter.value as CaseStatus | "";
          void this.refresh({
            patient_ref: (patientFilter as HTMLInputElement).value.trim() || undefined,
            status: status === "" ? undefined : status,
          });
        },
      },
      "Apply",
    );
    const exportStatus = h("p", { id: "export-status", role: "status" });
    const exportButton = h(
      "button",
      {
        type: "button",
        id: "export-button",
        onclick: () => {
          void this.api
            .exportArchive({})
            .then((result) => {
              exportStatus.textContent = `Archive written to ${result.archive}`;
            })
            .catch(() => {
              exportStatus.textContent = "Export failed.";
            });
        },
      },
      "Export records",
    );

    const list = h("ul", { id: "case-list" });
    if (this.cases.length === 0) {
      list.append(h("li", { class: "empty", id: "empty-state" }, "No cases match."));
    }
    for (const item of this.cases) {
      const button = h(
        "button",
        { type: "button", class: "case-row", onclick: () => this.select(item) },
        `${item.created_at} · ${item.patient_ref} · ${item.mode} · ${item.status}`,
      );
      list.append(h("li", {}, button));
    }

    this.root.append(
      h(
        "section",
        { id: "records-browser" },
        h("h2", {}, "Patient records"),
        h("div", { class: "filters" }, patientFilter, statusFilter, applyButton, exportButton),
        exportStatus,
        list,
        this.detailPane(),
      ),
    );
  }

  private select(item: CaseView): void {
    this.selected = item;
    this.render();
  }

  private detailPane(): HTMLElement {
    if (!this.selected) return h("aside", { id: "case-detail" });
    const item = this.selected;
    const rows: (Node | string | null)[] = [
      h("h3", {}, `Case ${item.case_id}`),
      h("p", {}, `Patient ${item.patient_ref} · operator ${item.operator_id}`),
      h("p", {}, `Created ${item.created_at} · ${item.mode} · ${item.status}`),
      h("img", {
        id: "detail-image",
        alt: "case image",
        src: this.api.imageUrl(item.case_id),
      }),
    ];
    if (item.expert_diagnosis) {
      rows.push(
        h(
          "p",
          { id: "detail-expert" },
          `Expert diagnosis: ${item.expert_diagnosis.label} at ${item.expert_diagnosis.entered_at}`,
        ),
      );
    }
    if (item.ai_result) {
      rows.push(
        h("p", { id: "detail-verdict" }, `Model verdict: ${item.ai_result.label}`),
        h("img", {
          id: "detail-overlay",
          alt: "explanation overlay",
          src: this.api.gradcamUrl(item.case_id),
        }),
      );
    } else {
      rows.push(
        h(
          "p",
          { id: "detail-withheld" },
          item.status === "AWAITING_EXPERT"
            ? "Model verdict withheld until the expert diagnosis is recorded."
            : "No model verdict stored for this case.",
        ),
      );
    }
    return h("aside", { id: "case-detail" }, ...rows);
  }
}
