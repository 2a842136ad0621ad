// Station shell: two tabs (screen / records) over the local service API.

import { ScreeningApi } from "./api.js";
import { clear, h } from "./dom.js";
import { RecordsView } from "./records.js";
import { ScreenView } from "./screen.js";
import { activeCaseId } from "./state.js";

export class App {
  readonly screen: ScreenView;
  readonly records: RecordsView;
  private readonly screenRoot: HTMLElement;
  private readonly recordsRoot: HTMLElement;

  constructor(
    private readonly root: HTMLElement,
    api: ScreeningApi = new ScreeningApi(),
    private readonly storage: Storage = window.sessionStorage,
  ) {
    this.screenRoot = h("main", { id: "screen-root" });
    this.recordsRoot = h("main", { id: "records-root", class: "hidden" });
    this.screen = new ScreenView(this.screenRoot, api, storage);
    this.records = new RecordsView(this.recordsRoot, api);
  }

  async boot(): Promise<void> {
    clear(this.root);
    const screenTab = h(
      "button",
      { type: "button", id: "tab-screen", onclick: () => this.show("screen") },
      "Screen",
    );
    const recordsTab = h(
      "button",
      {
        type: "button",
        id: "tab-records",
        onclick: () => {
          this.show("records");
          void this.records.refresh();
        },
      },
      "Records",
    );
    this.root.append(
      h("header", {}, h("h1", {}, "VIA screening station"), screenTab, recordsTab),
      this.screenRoot,
      this.recordsRoot,
    );

    // a reload mid-expert-flow must come back to the sealed diagnosis form
    const pending = activeCaseId(this.storage);
    if (pending) {
      await this.screen.rehydrate(pending);
    } else {
      this.screen.render();
    }
  }

  show(which: "screen" | "records"): void {
    this.screenRoot.classList.toggle("hidden", which !== "screen");
    this.recordsRoot.classList.toggle("hidden", which !== "records");
  }
}
