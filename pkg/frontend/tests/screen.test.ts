import { beforeEach, describe, expect, it } from "vitest";

import { ScreeningApi } from "../src/api.js";
import { App } from "../src/app.js";
import { MockService, sampleImage } from "./mockService.js";

function mount(): HTMLElement {
  document.body.innerHTML = '<div id="app"></div>';
  return document.getElementById("app")!;
}

async function bootApp(service: MockService): Promise<App> {
  const app = new App(mount(), new ScreeningApi(service.fetch), window.sessionStorage);
  await app.boot();
  return app;
}

function fillForm(mode: "NOVICE" | "EXPERT"): void {
  (document.getElementById("patient-ref") as HTMLInputElement).value = "pt-100";
  (document.getElementById("operator-id") as HTMLInputElement).value = "op-9";
  const radio = document.querySelector(
    `input[name=mode][value=${mode}]`,
  ) as HTMLInputElement;
  radio.checked = true;
}

async function attachImage(app: App): Promise<void> {
  // happy-dom file inputs cannot be assigned through the picker; inject the
  // pending file the way the change handler would
  (app.screen as unknown as { pendingImage: File }).pendingImage = sampleImage();
}

async function submitCase(app: App, mode: "NOVICE" | "EXPERT"): Promise<void> {
  fillForm(mode);
  await attachImage(app);
  (document.getElementById("capture-form") as HTMLFormElement).dispatchEvent(
    new Event("submit", { bubbles: true, cancelable: true }),
  );
  await new Promise((resolve) => setTimeout(resolve, 0));
}

function verdictVisible(): boolean {
  const text = document.body.textContent ?? "";
  return text.includes("VIA POSITIVE") || text.includes("probability");
}

beforeEach(() => {
  window.sessionStorage.clear();
});

describe("novice flow", () => {
  it("shows the result after exactly one service round-trip", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "NOVICE");

    expect(document.getElementById("ai-verdict")?.textContent).toContain("VIA POSITIVE");
    expect(document.getElementById("ai-probability")?.textContent).toContain("91.0%");
    const posts = service.requests.filter((r) => r.method === "POST");
    expect(posts).toEqual([{ method: "POST", url: "/api/cases" }]);
  });

  it("overlay toggle swaps between heatmap and raw image", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "NOVICE");

    const image = document.getElementById("result-image") as HTMLImageElement;
    const heat = image.src;
    expect(heat).toContain("/gradcam");
    (document.getElementById("overlay-toggle") as HTMLButtonElement).click();
    expect(image.src).toContain("/image");
    (document.getElementById("overlay-toggle") as HTMLButtonElement).click();
    expect(image.src).toBe(heat);
  });

  it("missing image is an inline validation error, no request sent", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    fillForm("NOVICE");
    (document.getElementById("capture-form") as HTMLFormElement).dispatchEvent(
      new Event("submit", { bubbles: true, cancelable: true }),
    );
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(document.getElementById("form-error")?.textContent).toContain("image");
    expect(service.requests.length).toBe(0);
  });

  it("malformed image rejection is an inline validation error", async () => {
    const service = new MockService();
    service.rejectNextCreate = true;
    const app = await bootApp(service);
    await submitCase(app, "NOVICE");
    expect(document.getElementById("form-error")?.textContent).toContain(
      "image could not be decoded",
    );
    // still on the capture form, not the retry banner
    expect(document.getElementById("capture-form")).not.toBeNull();
    expect(document.getElementById("retry-banner")?.classList.contains("hidden")).toBe(true);
  });

  it("service outage keeps the capture and offers retry", async () => {
    const service = new MockService();
    service.offlineOnce = true;
    const app = await bootApp(service);
    await submitCase(app, "NOVICE");

    const banner = document.getElementById("retry-banner")!;
    expect(banner.classList.contains("hidden")).toBe(false);
    expect(banner.textContent).toContain("kept on this station");

    (document.getElementById("retry-submit") as HTMLButtonElement).click();
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(document.getElementById("ai-verdict")).not.toBeNull();
  });
});

describe("expert flow gating", () => {
  it("cannot reach RESULT_SHOWN before an acknowledged diagnosis", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "EXPERT");

    expect(app.screen.flow.phase).toBe("AWAITING_EXPERT_INPUT");
    expect(document.getElementById("diagnosis-modal")).not.toBeNull();
    expect(verdictVisible()).toBe(false);
    // the modal offers only the two diagnosis commitments, nothing else
    const buttons = [...document.querySelectorAll("#diagnosis-modal button")].map(
      (b) => b.id,
    );
    expect(buttons.sort()).toEqual(["diagnose-negative", "diagnose-positive"]);

    (document.getElementById("diagnose-positive") as HTMLButtonElement).click();
    await new Promise((resolve) => setTimeout(resolve, 0));

    expect(app.screen.flow.phase).toBe("RESULT_SHOWN");
    expect(document.getElementById("ai-verdict")).not.toBeNull();
    expect(document.getElementById("agreement-banner")?.textContent).toContain("agrees");
  });

  it("disagreement banner renders when verdicts differ", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "EXPERT");
    (document.getElementById("diagnose-negative") as HTMLButtonElement).click();
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(document.getElementById("agreement-banner")?.textContent).toContain(
      "Disagreement",
    );
  });

  it("no withheld verdict ever appears in the DOM before acknowledgment", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "EXPERT");
    const html = document.body.innerHTML;
    expect(html).not.toContain("VIA_POSITIVE");
    expect(html).not.toContain("probability");
    expect(html).not.toContain("0.91");
  });

  it("gating survives a page reload", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "EXPERT");
    expect(app.screen.flow.phase).toBe("AWAITING_EXPERT_INPUT");

    // same storage and service state, fresh DOM and app instance
    const reloaded = new App(mount(), new ScreeningApi(service.fetch), window.sessionStorage);
    await reloaded.boot();
    expect(reloaded.screen.flow.phase).toBe("AWAITING_EXPERT_INPUT");
    expect(document.getElementById("diagnosis-modal")).not.toBeNull();
    expect(verdictVisible()).toBe(false);

    (document.getElementById("diagnose-positive") as HTMLButtonElement).click();
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(reloaded.screen.flow.phase).toBe("RESULT_SHOWN");
  });

  it("diagnosis buttons disable while the submission is in flight", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "EXPERT");
    const positive = document.getElementById("diagnose-positive") as HTMLButtonElement;
    positive.click();
    expect(positive.disabled).toBe(true);
    await new Promise((resolve) => setTimeout(resolve, 0));
  });

  it("conflicting second diagnosis shows a toast", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "EXPERT");
    const caseId = app.screen.flow.view!.case_id;
    // another operator races this station and diagnoses first
    await service.fetch(`/api/cases/${caseId}/expert-diagnosis`, {
      method: "POST",
      body: JSON.stringify({ diagnosis: "VIA_NEGATIVE" }),
    });
    (document.getElementById("diagnose-positive") as HTMLButtonElement).click();
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(document.getElementById("diagnosis-toast")?.textContent).toContain(
      "already recorded",
    );
  });

  it("diagnosis form is keyboard-reachable", async () => {
    const service = new MockService();
    const app = await bootApp(service);
    await submitCase(app, "EXPERT");
    const positive = document.getElementById("diagnose-positive") as HTMLButtonElement;
    positive.focus();
    expect(document.activeElement).toBe(positive);
  });
});

describe("offline posture", () => {
  it("every request the app makes stays on the local origin", async () => {
    const service = new MockService();  // throws on any absolute-origin URL
    const app = await bootApp(service);
    await submitCase(app, "EXPERT");
    (document.getElementById("diagnose-positive") as HTMLButtonElement).click();
    await new Promise((resolve) => setTimeout(resolve, 0));
    expect(service.requests.every((r) => r.url.startsWith("/api/"))).toBe(true);
  });
});
