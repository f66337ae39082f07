import { DeepRevealApi } from "./api.js";
import { createApp } from "./app.js";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const api = new DeepRevealApi((input, init) => fetch(input, init));
const app = createApp(root, api, window.localStorage);
void app.boot();
