// Screening view: capture/upload, mode selection, the unskippable expert
// diagnosis form, and the result card with a heatmap overlay toggle.

import type { CaseMode, CaseView, ScreeningApi, ViaLabel } from "./api.js";
import { ServiceError } from "./api.js";
import { clear, h } from "./dom.js";
import {
  CaseFlow,
  clearActiveCase,
  rememberActiveCase,
} from "./state.js";

export class ScreenView {
  readonly flow = new CaseFlow();
  private pendingImage: File | null = null;
  private submitting = false;

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ScreeningApi,
    private readonly storage: Storage,
  ) {}

  render(): void {
    clear(this.root);
    switch (this.flow.phase) {
      case "CAPTURING":
        this.root.append(this.captureForm());
        break;
      case "SUBMITTED":
      case "AWAITING_EXPERT_INPUT":
        this.root.append(this.diagnosisPanel());
        break;
      case "RESULT_SHOWN":
        this.root.append(this.resultCard());
        break;
    }
  }

  async rehydrate(caseId: string): Promise<void> {
    try {
      const view = await this.api.getCase(caseId);
      this.flow.rehydrate(view);
      if (this.flow.phase === "CAPTURING") clearActiveCase(this.storage);
    } catch {
      clearActiveCase(this.storage);
      this.flow.reset();
    }
    this.render();
  }

  private captureForm(): HTMLElement {
    const fileInput = h("input", { type: "file", accept: "image/*", id: "image-input" });
    const preview = h("img", { id: "capture-preview", alt: "" });
    fileInput.addEventListener("change", () => {
      this.pendingImage = fileInput.files?.[0] ?? null;
      if (this.pendingImage && typeof URL.createObjectURL === "function") {
        preview.src = URL.createObjectURL(this.pendingImage);
      }
    });
    const patient = h("input", { type: "text", id: "patient-ref", required: true });
    const operator = h("input", { type: "text", id: "operator-id", required: true });
    const errorBox = h("p", { class: "error", id: "form-error", role: "alert" });
    const retryBanner = h("div", { class: "banner hidden", id: "retry-banner", role: "alert" });

    const form = h(
      "form",
      { id: "capture-form" },
      h("h2", {}, "New screening"),
      h("label", { for: "patient-ref" }, "Patient reference", patient),
      h("label", { for: "operator-id" }, "Operator", operator),
      h(
        "fieldset",
        { id: "mode-select" },
        h("legend", {}, "Mode"),
        h("label", {}, h("input", { type: "radio", name: "mode", value: "NOVICE", checked: true }), "Novice"),
        h("label", {}, h("input", { type: "radio", name: "mode", value: "EXPERT" }), "Expert"),
      ),
      h("label", { for: "image-input" }, "Cervix image", fileInput),
      preview,
      errorBox,
      retryBanner,
      h("button", { type: "submit", id: "submit-case" }, "Run screening"),
    );

    form.addEventListener("submit", (event) => {
      event.preventDefault();
      void this.submit(form, errorBox, retryBanner);
    });
    return form;
  }

  private async submit(
    form: HTMLFormElement,
    errorBox: HTMLElement,
    retryBanner: HTMLElement,
  ): Promise<void> {
    if (this.submitting) return;
    errorBox.textContent = "";
    retryBanner.classList.add("hidden");
    clear(retryBanner);
    const patient = (form.querySelector("#patient-ref") as HTMLInputElement).value.trim();
    const operator = (form.querySelector("#operator-id") as HTMLInputElement).value.trim();
    const mode = (form.querySelector("input[name=mode]:checked") as HTMLInputElement)
      .value as CaseMode;
    if (!patient || !operator) {
      errorBox.textContent = "Patient reference and operator are required.";
      return;
    }
    if (!this.pendingImage) {
      errorBox.textContent = "Select a cervix image first.";
      return;
    }
    this.submitting = true;
    try {
      const view = await this.api.createCase(this.pendingImage, {
        mode,
        patient_ref: patient,
        operator_id: operator,
      });
      this.flow.submitted(view);
      if (this.flow.phase === "AWAITING_EXPERT_INPUT") {
        rememberActiveCase(this.storage, view.case_id);
      } else {
        clearActiveCase(this.storage);
      }
      this.render();
    } catch (error) {
      if (error instanceof ServiceError) {
        // validation problem: the image stays selected for correction
        errorBox.textContent = `Screening rejected: ${error.message}`;
      } else {
        // service unreachable: the captured image is retained client-side
        retryBanner.classList.remove("hidden");
        retryBanner.append(
          "Service unreachable. The image is kept on this station. ",
          h(
            "button",
            { type: "button", id: "retry-submit", onclick: () => void this.submit(form, errorBox, retryBanner) },
            "Retry",
          ),
        );
      }
    } finally {
      this.submitting = false;
    }
  }

  private diagnosisPanel(): HTMLElement {
    const view = this.flow.view;
    if (!view) throw new Error("no active case");
    const toast = h("p", { class: "error", id: "diagnosis-toast", role: "alert" });
    const buttons: HTMLButtonElement[] = [];

    const submitDiagnosis = async (label: ViaLabel) => {
      buttons.forEach((b) => (b.disabled = true));
      try {
        const updated = await this.api.submitDiagnosis(view.case_id, label);
        this.flow.diagnosisAcknowledged(updated);
        clearActiveCase(this.storage);
        this.render();
      } catch (error) {
        if (error instanceof ServiceError && error.status === 409) {
          toast.textContent = "A diagnosis was already recorded for this case.";
        } else {
          toast.textContent = "Could not record the diagnosis. Try again.";
          buttons.forEach((b) => (b.disabled = false));
        }
      }
    };

    const positive = h(
      "button",
      { type: "button", id: "diagnose-positive", onclick: () => void submitDiagnosis("VIA_POSITIVE") },
      "VIA positive",
    ) as HTMLButtonElement;
    const negative = h(
      "button",
      { type: "button", id: "diagnose-negative", onclick: () => void submitDiagnosis("VIA_NEGATIVE") },
      "VIA negative",
    ) as HTMLButtonElement;
    buttons.push(positive, negative);

    // modal without any dismiss/skip control: the verdict stays sealed until
    // the expert commits a diagnosis
    return h(
      "section",
      { class: "modal", id: "diagnosis-modal", role: "dialog", "aria-modal": "true" },
      h("h2", {}, "Expert diagnosis required"),
      h(
        "p",
        {},
        `Case ${view.case_id} for patient ${view.patient_ref} is recorded. ` +
          "Enter your own diagnosis to unlock the screening result.",
      ),
      h("div", { class: "choices" }, positive, negative),
      toast,
    );
  }

  private resultCard(): HTMLElement {
    const view = this.flow.view;
    if (!view || !view.ai_result) throw new Error("result card without a revealed result");
    const ai = view.ai_result;
    const overlayUrl = this.api.gradcamUrl(view.case_id);
    const rawUrl = this.api.imageUrl(view.case_id);

    const image = h("img", {
      id: "result-image",
      alt: "screening result image",
      src: overlayUrl,
      "data-overlay": "on",
    });
    const toggle = h(
      "button",
      {
        type: "button",
        id: "overlay-toggle",
        onclick: () => {
          const on = image.getAttribute("data-overlay") === "on";
          image.setAttribute("data-overlay", on ? "off" : "on");
          image.src = on ? rawUrl : overlayUrl;
        },
      },
      "Toggle heatmap",
    );

    const verdictClass = ai.label === "VIA_POSITIVE" ? "verdict positive" : "verdict negative";
    const pieces: (Node | string | null)[] = [
      h("h2", {}, "Screening result"),
      h("p", { class: verdictClass, id: "ai-verdict" }, ai.label.replace("VIA_", "VIA ")),
      h("p", { id: "ai-probability" }, `Model probability: ${(ai.probability * 100).toFixed(1)}%`),
    ];
    if (view.mode === "EXPERT" && view.agreement !== undefined) {
      pieces.push(
        h(
          "p",
          {
            id: "agreement-banner",
            class: view.agreement ? "banner agree" : "banner disagree",
            role: "status",
          },
          view.agreement
            ? "The model agrees with your diagnosis."
            : "Disagreement: the model's verdict differs from your diagnosis.",
        ),
      );
    }
    pieces.push(image, toggle);
    pieces.push(
      h(
        "button",
        {
          type: "button",
          id: "new-case",
          onclick: () => {
            this.flow.reset();
            this.pendingImage = null;
            this.render();
          },
        },
        "New case",
      ),
    );
    return h("section", { class: "result-card" }, ...pieces);
  }
}
